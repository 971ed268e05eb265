//! Block cross-validated subcase experiments: SHORE inputs, SH or SHORE
//! targets, log-space training, ACC scoring against ground truth.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::net::{build_model, kfold_split_blocks, predict, train_with_validation, Standardizer, TrainConfig, VoxelDataset};
use crate::nonneg::{clamp_log_one, exp_restore, NonNegConfig};
use crate::phantom::PhantomDataset;
use crate::sh::{acc_coeffs, eval_sh_basis, sh_coeff_count, ShFitter};
use crate::shore::{fod_shore_fitter, optimize_zeta_columns, QSpaceSamples, ShoreFitConfig, ShoreFitter, SHELL_TOLERANCE};
use crate::sphere::{generate_uniform_directions, DirectionSet};
use crate::stats::{bonferroni, summarize_report, wilcoxon_signed_rank};

/// Input/output representation pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Subcase {
    #[serde(rename = "opt-shore-to-sh")]
    OptShoreToSh,
    #[serde(rename = "unopt-shore-to-shore")]
    UnoptShoreToShore,
    #[serde(rename = "opt-shore-to-shore")]
    OptShoreToShore,
}

impl Subcase {
    pub const ALL: [Subcase; 3] = [Self::OptShoreToSh, Self::UnoptShoreToShore, Self::OptShoreToShore];

    pub fn name(self) -> &'static str {
        match self {
            Self::OptShoreToSh => "opt-shore-to-sh",
            Self::UnoptShoreToShore => "unopt-shore-to-shore",
            Self::OptShoreToShore => "opt-shore-to-shore",
        }
    }

    pub fn optimizes_zeta(self) -> bool {
        !matches!(self, Self::UnoptShoreToShore)
    }

    pub fn shore_targets(self) -> bool {
        !matches!(self, Self::OptShoreToSh)
    }
}

impl fmt::Display for Subcase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subcase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .replace("→", "-to-")
            .replace("->", "-to-")
            .replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| invalid(format!("unknown subcase {s:?}")))
    }
}

/// Which signal representation ζ is tuned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZetaSpace {
    /// The clamped log signal that is actually fed to the network.
    Log,
    /// The raw attenuation.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub subcase: Subcase,
    /// Shells used as input; `None` uses every shell in the data.
    pub shells: Option<Vec<f64>>,
    /// Shell removed from the input mask.
    pub withhold_b: Option<f64>,
    pub shore: ShoreFitConfig,
    pub nonneg: NonNegConfig,
    pub train: TrainConfig,
    pub sh_order: usize,
    /// Size and seed of the sphere sampling used for FOD conversions.
    pub sphere_directions: usize,
    pub directions_seed: u64,
    pub repulsion_iterations: usize,
    pub eval_folds: usize,
    /// Hold out one inner training fold for best-epoch selection.
    pub nested: bool,
    pub fold_seed: u64,
    /// Starting (and, without optimization, fixed) ζ; defaults to median(b)/8.
    pub zeta0: Option<f64>,
    pub zeta_space: ZetaSpace,
    /// Training rows used for ζ optimization, evenly subsampled.
    pub zeta_max_rows: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            subcase: Subcase::OptShoreToShore,
            shells: None,
            withhold_b: Some(6000.0),
            shore: ShoreFitConfig::default(),
            nonneg: NonNegConfig::default(),
            train: TrainConfig::default(),
            sh_order: 8,
            sphere_directions: 100,
            directions_seed: 7,
            repulsion_iterations: 1000,
            eval_folds: 8,
            nested: true,
            fold_seed: 0,
            zeta0: None,
            zeta_space: ZetaSpace::Linear,
            zeta_max_rows: 2000,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.shore.validate()?;
        self.nonneg.validate()?;
        self.train.validate()?;
        sh_coeff_count(self.sh_order)?;
        if self.eval_folds < 2 {
            return Err(invalid("eval_folds must be at least 2"));
        }
        if self.zeta_max_rows == 0 {
            return Err(invalid("zeta_max_rows must be at least 1"));
        }
        if let Some(z) = self.zeta0 {
            if !(z > 0.0 && z.is_finite()) {
                return Err(invalid("zeta0 must be positive"));
            }
        }
        Ok(())
    }

    /// Sample indices kept by the shell mask (b0 samples always included).
    pub fn mask_indices(&self, samples: &QSpaceSamples) -> Result<Vec<usize>> {
        let available = samples.shells();
        let mut shells = match &self.shells {
            Some(s) => {
                for b in s {
                    if !available.iter().any(|a| (a - b).abs() <= SHELL_TOLERANCE) {
                        return Err(invalid(format!("data has no shell at b = {b}")));
                    }
                }
                s.clone()
            }
            None => available,
        };
        if let Some(w) = self.withhold_b {
            shells.retain(|b| (b - w).abs() > SHELL_TOLERANCE);
        }
        let idx = samples.shell_mask_indices(&shells);
        if !idx.iter().any(|&i| samples.bvalues()[i] >= SHELL_TOLERANCE) {
            return Err(invalid("shell mask selects no diffusion-weighted samples"));
        }
        Ok(idx)
    }
}

/// Per-fold record of which blocks fed which estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub train_blocks: usize,
    pub test_blocks: usize,
    pub validation_blocks: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    pub zeta: f64,
    pub zeta_initial: f64,
    pub zeta_rows: usize,
    /// Test blocks that contributed to ζ (must be 0).
    pub zeta_test_overlap: usize,
    /// Test blocks that contributed to standardization or training (must be 0).
    pub fit_test_overlap: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: Subcase,
    pub b: Subcase,
    pub statistic: f64,
    pub p_value: f64,
    pub p_bonferroni: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subcase: Subcase,
    pub config: PipelineConfig,
    pub shells_used: Vec<f64>,
    /// Dataset row of every ACC entry, ascending.
    pub rows: Vec<usize>,
    pub acc: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    /// Smallest value produced by the exponential restore.
    pub min_restored: f64,
    pub folds: Vec<FoldAudit>,
    #[serde(default)]
    pub comparisons: Vec<Comparison>,
}

impl EvalReport {
    pub fn fold_acc(&self, fold: &[usize]) -> Vec<f64> {
        let set: BTreeSet<usize> = fold.iter().copied().collect();
        self.rows
            .iter()
            .zip(&self.acc)
            .filter(|(r, _)| set.contains(r))
            .map(|(_, a)| *a)
            .collect()
    }
}

struct FoldOutcome {
    rows: Vec<usize>,
    acc: Vec<f64>,
    min_restored: f64,
    audit: FoldAudit,
}

fn blocks_of(ids: &[u32], rows: &[usize]) -> BTreeSet<u32> {
    rows.iter().map(|&r| ids[r]).collect()
}

fn map_matrix(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    m.map(f)
}

/// Shared, ζ-independent inputs of every fold.
struct Prepared<'a> {
    data: &'a PhantomDataset,
    masked: QSpaceSamples,
    /// samples × rows, already selected by the mask.
    linear_cols: DMatrix<f64>,
    log_cols: DMatrix<f64>,
    dirs: DirectionSet,
    sh_fitter: ShFitter,
    /// sphere samples × rows, log of the ground-truth FOD.
    gt_log_cols: DMatrix<f64>,
    sh_basis: DMatrix<f64>,
}

fn prepare<'a>(cfg: &PipelineConfig, data: &'a PhantomDataset) -> Result<Prepared<'a>> {
    let mask = cfg.mask_indices(&data.samples)?;
    let masked = data.samples.subset(&mask)?;
    let linear_cols = data.signals.select_columns(&mask).transpose();
    let eps = cfg.nonneg.epsilon;
    let log_cols = map_matrix(&linear_cols, |v| clamp_log_one(v, eps));
    let dirs = generate_uniform_directions(cfg.sphere_directions, cfg.directions_seed, cfg.repulsion_iterations)?;
    let sh_basis = eval_sh_basis(&dirs, cfg.sh_order)?.matrix;
    if data.fods.ncols() != sh_basis.ncols() {
        return Err(Error::LengthMismatch {
            expected: sh_basis.ncols(),
            found: data.fods.ncols(),
        });
    }
    let gt_log_cols = map_matrix(&(&sh_basis * data.fods.transpose()), |v| clamp_log_one(v, eps));
    let sh_fitter = ShFitter::new(&dirs, cfg.sh_order, 0.0)?;
    Ok(Prepared {
        data,
        masked,
        linear_cols,
        log_cols,
        dirs,
        sh_fitter,
        gt_log_cols,
        sh_basis,
    })
}

fn run_fold(cfg: &PipelineConfig, p: &Prepared, index: usize, train_rows: &[usize], test_rows: &[usize]) -> Result<FoldOutcome> {
    let ids = &p.data.block_ids;
    let test_blocks = blocks_of(ids, test_rows);

    let zeta0 = cfg.zeta0.unwrap_or_else(|| p.masked.default_zeta0());
    let step = train_rows.len().div_ceil(cfg.zeta_max_rows).max(1);
    let zeta_rows: Vec<usize> = train_rows.iter().step_by(step).copied().collect();
    let zeta = if cfg.subcase.optimizes_zeta() {
        let source = match cfg.zeta_space {
            ZetaSpace::Log => &p.log_cols,
            ZetaSpace::Linear => &p.linear_cols,
        };
        optimize_zeta_columns(&source.select_columns(&zeta_rows), &p.masked, &cfg.shore, zeta0)?.zeta
    } else {
        zeta0
    };
    let zeta_test_overlap = if cfg.subcase.optimizes_zeta() {
        blocks_of(ids, &zeta_rows).intersection(&test_blocks).count()
    } else {
        0
    };

    let input_fitter = ShoreFitter::new(&p.masked, &cfg.shore, zeta)?;
    let inputs = input_fitter.fit_columns(&p.log_cols)?.transpose();
    let (targets, eval_basis) = if cfg.subcase.shore_targets() {
        let f = fod_shore_fitter(&p.dirs, zeta, &cfg.shore)?;
        (f.fit_columns(&p.gt_log_cols)?.transpose(), f.linear_fit().design().clone())
    } else {
        (p.sh_fitter.fit_columns(&p.gt_log_cols)?.transpose(), p.sh_basis.clone())
    };

    let train_ids: Vec<u32> = train_rows.iter().map(|&r| ids[r]).collect();
    let train_set = VoxelDataset::new(inputs.select_rows(train_rows), targets.select_rows(train_rows), train_ids.clone())?;
    let (fit_set, validation) = if cfg.nested {
        let inner = kfold_split_blocks(&train_ids, cfg.train.k_folds, cfg.fold_seed.wrapping_add(1 + index as u64))?;
        (train_set.select_rows(&inner[0].train)?, Some(train_set.select_rows(&inner[0].test)?))
    } else {
        (train_set, None)
    };
    let fit_test_overlap = fit_set.block_ids.iter().filter(|b| test_blocks.contains(b)).collect::<BTreeSet<_>>().len();
    let validation_blocks = validation
        .as_ref()
        .map_or(0, |v| v.block_ids.iter().collect::<BTreeSet<_>>().len());

    let scaler = Standardizer::fit(&fit_set);
    let fit_std = scaler.transform(&fit_set)?;
    let val_std = validation.as_ref().map(|v| scaler.transform(v)).transpose()?;
    let model = build_model(inputs.ncols(), targets.ncols(), cfg.train.seed)?;
    let outcome = train_with_validation(&model, &fit_std, val_std.as_ref(), &cfg.train)?;

    let test_inputs = scaler.transform_inputs(&inputs.select_rows(test_rows));
    let pred = scaler.inverse_targets(&predict(&outcome.model, &test_inputs)?);
    let log_sphere = &eval_basis * pred.transpose();
    let restored = exp_restore(log_sphere.as_slice())?;
    let min_restored = restored.iter().copied().fold(f64::INFINITY, f64::min);
    let restored = DMatrix::from_vec(log_sphere.nrows(), log_sphere.ncols(), restored);
    let sh = p.sh_fitter.fit_columns(&restored)?;

    let acc = test_rows
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            let truth: Vec<f64> = p.data.fods.row(r).iter().copied().collect();
            acc_coeffs(sh.column(j).as_slice(), &truth)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(FoldOutcome {
        rows: test_rows.to_vec(),
        acc,
        min_restored,
        audit: FoldAudit {
            fold: index,
            train_blocks: blocks_of(ids, train_rows).len(),
            test_blocks: test_blocks.len(),
            validation_blocks,
            train_rows: train_rows.len(),
            test_rows: test_rows.len(),
            zeta,
            zeta_initial: zeta0,
            zeta_rows: zeta_rows.len(),
            zeta_test_overlap,
            fit_test_overlap,
            best_epoch: outcome.best_epoch,
            final_train_loss: outcome.loss_history.last().copied().unwrap_or(f64::NAN),
        },
    })
}

/// Runs one subcase over `cfg.eval_folds` block folds. ζ is estimated on
/// the training rows of each fold and frozen for its test rows.
pub fn run_subcase_experiment(cfg: &PipelineConfig, data: &PhantomDataset) -> Result<EvalReport> {
    cfg.validate()?;
    let prepared = prepare(cfg, data)?;
    let folds = kfold_split_blocks(&data.block_ids, cfg.eval_folds, cfg.fold_seed)?;
    let outcomes = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| run_fold(cfg, &prepared, i, &f.train, &f.test))
        .collect::<Result<Vec<_>>>()?;

    let mut pairs: Vec<(usize, f64)> = outcomes
        .iter()
        .flat_map(|o| o.rows.iter().copied().zip(o.acc.iter().copied()))
        .collect();
    pairs.sort_by_key(|(r, _)| *r);
    let (rows, acc): (Vec<usize>, Vec<f64>) = pairs.into_iter().unzip();
    let (median, mean) = summarize_report(&acc)?;
    let min_restored = outcomes.iter().map(|o| o.min_restored).fold(f64::INFINITY, f64::min);
    let mut shells_used = prepared.masked.shells();
    shells_used.dedup();
    Ok(EvalReport {
        subcase: cfg.subcase,
        config: cfg.clone(),
        shells_used,
        rows,
        acc,
        median,
        mean,
        min_restored,
        folds: outcomes.into_iter().map(|o| o.audit).collect(),
        comparisons: Vec::new(),
    })
}

/// Pairwise signed-rank tests between reports over the same rows, with
/// Bonferroni correction across all pairs. Each report receives the
/// comparisons it takes part in.
pub fn compare_reports(reports: &mut [EvalReport]) -> Result<Vec<Comparison>> {
    let mut raw = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            if reports[i].rows != reports[j].rows {
                return Err(invalid("reports cover different rows"));
            }
            let t = wilcoxon_signed_rank(&reports[i].acc, &reports[j].acc)?;
            raw.push((i, j, t));
        }
    }
    let corrected = bonferroni(&raw.iter().map(|(_, _, t)| t.p_value).collect::<Vec<_>>());
    let all: Vec<(usize, usize, Comparison)> = raw
        .into_iter()
        .zip(corrected)
        .map(|((i, j, t), pb)| {
            (
                i,
                j,
                Comparison {
                    a: reports[i].subcase,
                    b: reports[j].subcase,
                    statistic: t.statistic,
                    p_value: t.p_value,
                    p_bonferroni: pb,
                    n: t.n,
                },
            )
        })
        .collect();
    for r in reports.iter_mut() {
        r.comparisons.clear();
    }
    for (i, j, c) in &all {
        reports[*i].comparisons.push(c.clone());
        reports[*j].comparisons.push(c.clone());
    }
    Ok(all.into_iter().map(|(_, _, c)| c).collect())
}
