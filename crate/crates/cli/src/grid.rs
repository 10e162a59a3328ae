//! Hyperparameter grids and attributor construction.

use std::sync::OnceLock;

use tda_core::attrib::{
    AttributionTask, Attributor, GradCos, GradDot, InfluenceFunction, RepresenterPoints, TracInCp, Trak, TrakMember,
    TrakProjection,
};
use tda_core::datasets::Dataset;
use tda_core::diffops::{IhvpConfig, IhvpMethod};
use tda_core::modelzoo::{train, CheckpointSet, DropoutMasks, ModelSpec, TrainConfig};
use tda_core::rng::{derive_seed, SeedRole};
use tda_core::attrib::EnsembleMode;

use crate::config::{GridPoint, MethodConfig, MethodName, Seeds};
use crate::{CliError, Result};

/// Regularization values swept by the influence-function variants.
pub const REGULARIZATION_GRID: [f64; 6] = [1e-1, 1e-2, 5e-3, 1e-3, 1e-4, 1e-5];
pub const CG_MAX_ITER: usize = 10;
pub const ARNOLDI_MAX_ITER: usize = 50;
pub const LISSA_DEPTH: usize = 500;
pub const LISSA_BATCH_SIZES: [usize; 2] = [10, 50];
pub const RPS_REGULARIZATION_GRID: [f64; 6] = [10.0, 1.0, 1e-1, 1e-2, 1e-3, 1e-4];
pub const TRAK_PROJECTION_DIMS: [usize; 2] = [512, 2048];

pub fn default_grid(method: &MethodConfig) -> Vec<GridPoint> {
    let reg = |max_iter: Option<usize>| {
        REGULARIZATION_GRID
            .iter()
            .map(|&r| GridPoint { regularization: Some(r), max_iter, ..Default::default() })
            .collect()
    };
    match method.name {
        MethodName::IfExplicit => reg(None),
        MethodName::IfCg => reg(Some(CG_MAX_ITER)),
        MethodName::IfArnoldi => reg(Some(ARNOLDI_MAX_ITER)),
        MethodName::IfLissa => LISSA_BATCH_SIZES
            .iter()
            .map(|&b| GridPoint { recursion_depth: Some(LISSA_DEPTH), batch_size: Some(b), ..Default::default() })
            .collect(),
        MethodName::TracInCp | MethodName::GradDot | MethodName::GradCos => vec![GridPoint::default()],
        MethodName::RpsL2 => RPS_REGULARIZATION_GRID
            .iter()
            .flat_map(|&r| {
                [true, false].map(|n| GridPoint { regularization: Some(r), normalize: Some(n), ..Default::default() })
            })
            .collect(),
        MethodName::Trak => method
            .ensemble
            .sizes
            .iter()
            .flat_map(|&size| {
                TRAK_PROJECTION_DIMS.map(|d| GridPoint {
                    projection_dim: Some(d),
                    ensemble_size: Some(size),
                    ..Default::default()
                })
            })
            .collect(),
    }
}

pub fn grid(method: &MethodConfig) -> Vec<GridPoint> {
    method.grid.clone().unwrap_or_else(|| default_grid(method))
}

/// Everything needed to build attributors for one trained model.
pub struct AttribContext {
    pub spec: ModelSpec,
    pub checkpoints: CheckpointSet,
    pub train: Dataset,
    /// Training recipe of the attribution model (TRAK retrains with it).
    pub train_cfg: TrainConfig,
    pub seeds: Seeds,
    pub method: MethodConfig,
    members: OnceLock<std::result::Result<Vec<TrakMember>, String>>,
}

impl AttribContext {
    pub fn new(
        spec: ModelSpec,
        checkpoints: CheckpointSet,
        train: Dataset,
        train_cfg: TrainConfig,
        seeds: Seeds,
        method: MethodConfig,
    ) -> Self {
        AttribContext { spec, checkpoints, train, train_cfg, seeds, method, members: OnceLock::new() }
    }

    fn task(&self) -> Result<AttributionTask> {
        Ok(AttributionTask::new(self.spec, self.checkpoints.clone())?.with_target(self.method.target))
    }

    /// Seed of ensemble member `i`; attribution side of the seed split.
    pub fn member_seed(&self, i: usize) -> u64 {
        SeedRole::Attribution.seed(self.seeds.method, i as u64)
    }

    /// The first `size` TRAK members. All sizes in the sweep share one
    /// ensemble, so a smaller ensemble is a prefix of a larger one.
    fn members(&self, size: usize) -> Result<Vec<TrakMember>> {
        let largest = self.method.ensemble.sizes.iter().copied().max().unwrap_or(1).max(size);
        let all = self.members.get_or_init(|| {
            let seeds: Vec<u64> = (0..largest).map(|i| self.member_seed(i)).collect();
            match self.method.ensemble.mode {
                EnsembleMode::IndependentModels => seeds
                    .iter()
                    .map(|&seed| {
                        let cfg = TrainConfig { seed, checkpoint_epochs: vec![], ..self.train_cfg.clone() };
                        let ck = train(&self.spec, &self.train, &cfg).map_err(|e| e.to_string())?;
                        Ok(TrakMember { seed, params: ck.final_params().clone(), masks: None })
                    })
                    .collect(),
                EnsembleMode::DropoutMasks => {
                    let ModelSpec::Mlp { h1, h2, dropout_rate, .. } = self.spec else {
                        return Err("dropout ensembles need an MLP".into());
                    };
                    if dropout_rate <= 0.0 {
                        return Err("dropout ensembles need dropout_rate > 0".into());
                    }
                    let params = self.checkpoints.final_params().clone();
                    Ok(seeds
                        .iter()
                        .map(|&seed| TrakMember {
                            seed,
                            params: params.clone(),
                            masks: Some(DropoutMasks::sample(h1, h2, dropout_rate, seed)),
                        })
                        .collect())
                }
            }
        });
        match all {
            Ok(m) => Ok(m[..size].to_vec()),
            Err(e) => Err(CliError::Other(format!("building the TRAK ensemble failed: {e}"))),
        }
    }

    pub fn build(&self, point: &GridPoint) -> Result<Box<dyn Attributor>> {
        let m = &self.method;
        let need_reg = || {
            point
                .regularization
                .ok_or_else(|| CliError::Config(format!("{} grid point {} lacks regularization", m.name.as_str(), point.label())))
        };
        let ihvp = |method: IhvpMethod, reg: f64| {
            let mut cfg = IhvpConfig::new(method, reg);
            cfg.lissa.seed = derive_seed(self.seeds.method, "lissa", 0);
            cfg.arnoldi.seed = derive_seed(self.seeds.method, "arnoldi", 0);
            cfg
        };
        Ok(match m.name {
            MethodName::IfExplicit => Box::new(InfluenceFunction::new(self.task()?, ihvp(IhvpMethod::Explicit, need_reg()?))?),
            MethodName::IfCg => {
                let mut cfg = ihvp(IhvpMethod::Cg, need_reg()?);
                cfg.max_iter = point.max_iter.unwrap_or(CG_MAX_ITER);
                Box::new(InfluenceFunction::new(self.task()?, cfg)?)
            }
            MethodName::IfArnoldi => {
                let mut cfg = ihvp(IhvpMethod::Arnoldi, need_reg()?);
                let k = point.max_iter.unwrap_or(ARNOLDI_MAX_ITER);
                cfg.arnoldi.krylov_dim = k;
                cfg.arnoldi.top_k = k;
                Box::new(InfluenceFunction::new(self.task()?, cfg)?)
            }
            MethodName::IfLissa => {
                let mut cfg = ihvp(IhvpMethod::Lissa, point.regularization.unwrap_or(m.regularization));
                cfg.lissa.recursion_depth = point.recursion_depth.unwrap_or(LISSA_DEPTH);
                cfg.lissa.batch_size = point.batch_size.unwrap_or(LISSA_BATCH_SIZES[0]);
                if let Some(scale) = point.scale {
                    cfg.lissa.scale = scale;
                    cfg.lissa.auto_scale = false;
                }
                Box::new(InfluenceFunction::new(self.task()?, cfg)?)
            }
            MethodName::TracInCp => Box::new(TracInCp::new(self.task()?)?),
            MethodName::GradDot => Box::new(GradDot::new(self.task()?)),
            MethodName::GradCos => Box::new(GradCos::new(self.task()?)),
            MethodName::RpsL2 => {
                Box::new(RepresenterPoints::new(self.task()?, need_reg()?, point.normalize.unwrap_or(false))?)
            }
            MethodName::Trak => {
                let size = point.ensemble_size.unwrap_or(1);
                if size == 0 {
                    return Err(CliError::Config("ensemble_size must be ≥ 1".into()));
                }
                let projection = match point.projection_dim {
                    Some(dim) => TrakProjection::Random {
                        dim,
                        seed: derive_seed(self.seeds.method, "trak/projection", 0),
                        distribution: m.projection,
                    },
                    None => TrakProjection::Identity,
                };
                let lambda = point.regularization.unwrap_or(m.regularization);
                Box::new(Trak::new(self.spec, m.target, self.members(size)?, projection, lambda)?)
            }
        })
    }
}
