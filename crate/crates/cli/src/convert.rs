//! Conversions between in-memory types and containers.

use deepshore::io::{Container, ContainerKind};
use deepshore::net::{Dense, MlpArchitecture, MlpModel, Standardizer, TrainConfig};
use deepshore::phantom::{PhantomConfig, PhantomDataset};
use deepshore::shore::{QSpaceSamples, ShoreFitConfig};
use deepshore::sphere::{generate_uniform_directions, DirectionSet};
use deepshore::{Error, Result};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Shore,
    Sh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Log,
    Linear,
}

/// The fixed sphere sampling that FOD-side SHORE coefficients live on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SphereSpec {
    pub count: usize,
    pub seed: u64,
    pub iterations: usize,
}

impl SphereSpec {
    pub fn directions(&self) -> Result<DirectionSet> {
        generate_uniform_directions(self.count, self.seed, self.iterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffsMeta {
    pub representation: Representation,
    pub space: Space,
    pub nonneg_epsilon: f64,
    pub zeta: Option<f64>,
    pub shore: Option<ShoreFitConfig>,
    pub sh_order: Option<usize>,
    /// Input shells (signal side) or `None` for FOD-side coefficients.
    pub shells: Option<Vec<f64>>,
    pub sphere: Option<SphereSpec>,
}

/// Coefficients with the dataset rows they belong to.
#[derive(Debug, Clone)]
pub struct Coeffs {
    pub meta: CoeffsMeta,
    /// rows × coefficients.
    pub coeffs: DMatrix<f64>,
    pub rows: Vec<usize>,
    pub block_ids: Vec<u32>,
}

fn to_index(values: Vec<f64>) -> Vec<usize> {
    values.into_iter().map(|v| v as usize).collect()
}

pub fn coeffs_to_container(c: &Coeffs) -> Result<Container> {
    let mut out = Container::new(ContainerKind::Coeffs, serde_json::to_value(&c.meta)?);
    out.push_matrix("coeffs", &c.coeffs)?;
    out.push_vector("rows", &c.rows.iter().map(|&r| r as f64).collect::<Vec<_>>())?;
    out.push_vector("block_ids", &c.block_ids.iter().map(|&b| b as f64).collect::<Vec<_>>())?;
    Ok(out)
}

pub fn coeffs_from_container(c: &Container) -> Result<Coeffs> {
    let meta: CoeffsMeta = serde_json::from_value(c.metadata().clone())
        .map_err(|e| Error::Format(format!("coefficient metadata: {e}")))?;
    let coeffs = c.matrix("coeffs")?;
    let rows = to_index(c.vector("rows")?);
    let block_ids = c.vector("block_ids")?.into_iter().map(|v| v as u32).collect::<Vec<_>>();
    if rows.len() != coeffs.nrows() || block_ids.len() != coeffs.nrows() {
        return Err(Error::Format("row bookkeeping does not match the coefficients".into()));
    }
    Ok(Coeffs {
        meta,
        coeffs,
        rows,
        block_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetMeta {
    phantom: PhantomConfig,
    sh_order: usize,
}

pub fn dataset_to_container(d: &PhantomDataset) -> Result<Container> {
    let meta = DatasetMeta {
        phantom: d.config.clone(),
        sh_order: d.config.sh_order,
    };
    let mut out = Container::new(ContainerKind::Dataset, serde_json::to_value(meta)?);
    out.push_vector("bvalues", d.samples.bvalues())?;
    let dirs = d.samples.directions();
    out.push_matrix("directions", &DMatrix::from_fn(dirs.len(), 3, |r, c| dirs.as_slice()[r][c]))?;
    out.push_matrix("signals", &d.signals)?;
    out.push_matrix("fods", &d.fods)?;
    out.push_vector("block_ids", &d.block_ids.iter().map(|&b| b as f64).collect::<Vec<_>>())?;
    Ok(out)
}

pub fn dataset_from_container(c: &Container) -> Result<PhantomDataset> {
    let meta: DatasetMeta = serde_json::from_value(c.metadata().clone())
        .map_err(|e| Error::Format(format!("dataset metadata: {e}")))?;
    let dirs = c.matrix("directions")?;
    if dirs.ncols() != 3 {
        return Err(Error::Format("directions must have three columns".into()));
    }
    let dirs = DirectionSet::from_unnormalized(
        dirs.row_iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect(),
    )?;
    let samples = QSpaceSamples::new(c.vector("bvalues")?, dirs)?;
    let signals = c.matrix("signals")?;
    let fods = c.matrix("fods")?;
    let block_ids: Vec<u32> = c.vector("block_ids")?.into_iter().map(|v| v as u32).collect();
    if signals.ncols() != samples.len() || fods.nrows() != signals.nrows() || block_ids.len() != signals.nrows() {
        return Err(Error::Format("dataset segments disagree in size".into()));
    }
    let mut config = meta.phantom;
    config.sh_order = meta.sh_order;
    Ok(PhantomDataset {
        config,
        samples,
        signals,
        fods,
        block_ids,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub inputs: CoeffsMeta,
    pub targets: CoeffsMeta,
}

pub fn model_to_container(model: &MlpModel, scaler: &Standardizer, meta: &ModelMeta) -> Result<Container> {
    let mut out = Container::new(ContainerKind::Model, serde_json::to_value(meta)?);
    for (k, layer) in model.layers().iter().enumerate() {
        out.push_matrix(&format!("layer{k}.weights"), &layer.weights)?;
        out.push_vector(&format!("layer{k}.bias"), layer.bias.as_slice())?;
    }
    out.push_vector("input_mean", &scaler.input_mean)?;
    out.push_vector("input_scale", &scaler.input_scale)?;
    out.push_vector("target_mean", &scaler.target_mean)?;
    out.push_vector("target_scale", &scaler.target_scale)?;
    Ok(out)
}

pub fn model_from_container(c: &Container) -> Result<(MlpModel, Standardizer, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_value(c.metadata().clone())
        .map_err(|e| Error::Format(format!("model metadata: {e}")))?;
    let arch = MlpArchitecture::new(meta.input_dim, meta.output_dim)?;
    let layers = (0..arch.layer_shapes().len())
        .map(|k| {
            Ok(Dense {
                weights: c.matrix(&format!("layer{k}.weights"))?,
                bias: DVector::from_vec(c.vector(&format!("layer{k}.bias"))?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = MlpModel::from_layers(arch, layers, meta.seed)?;
    let scaler = Standardizer {
        input_mean: c.vector("input_mean")?,
        input_scale: c.vector("input_scale")?,
        target_mean: c.vector("target_mean")?,
        target_scale: c.vector("target_scale")?,
    };
    if scaler.input_mean.len() != meta.input_dim || scaler.target_mean.len() != meta.output_dim {
        return Err(Error::Format("standardizer does not match the model".into()));
    }
    Ok((model, scaler, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use deepshore::net::build_model;
    use deepshore::phantom::generate_dataset;

    #[test]
    fn dataset_round_trip() {
        let d = generate_dataset(&PhantomConfig {
            n_voxels: 2,
            rotations_per_voxel: 2,
            quadrature: [16, 33],
            ..Default::default()
        })
        .unwrap();
        let c = dataset_to_container(&d).unwrap();
        let back = dataset_from_container(&c).unwrap();
        assert_eq!(back.block_ids, d.block_ids);
        assert_eq!(back.config, d.config);
        assert!((&back.signals - &d.signals).abs().max() < 1e-6);
        for (a, b) in back.samples.directions().iter().zip(d.samples.directions().iter()) {
            assert!((a - b).norm() < 1e-6);
        }
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Container::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn model_round_trip() {
        let model = build_model(5, 3, 2).unwrap();
        let scaler = Standardizer::identity(5, 3);
        let meta_c = CoeffsMeta {
            representation: Representation::Shore,
            space: Space::Log,
            nonneg_epsilon: 0.005,
            zeta: Some(700.0),
            shore: Some(ShoreFitConfig::default()),
            sh_order: None,
            shells: None,
            sphere: None,
        };
        let meta = ModelMeta {
            input_dim: 5,
            output_dim: 3,
            seed: 2,
            train: TrainConfig::default(),
            inputs: meta_c.clone(),
            targets: meta_c,
        };
        let c = model_to_container(&model, &scaler, &meta).unwrap();
        let (m, s, back) = model_from_container(&c).unwrap();
        assert_eq!(back, meta);
        assert_eq!(s, scaler);
        assert_eq!(m.parameter_count(), model.parameter_count());
        assert_eq!(model_to_container(&m, &s, &back).unwrap(), c);
    }
}
