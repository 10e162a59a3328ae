use std::path::Path;

use crate::container::{Container, SegmentHeader, TAG_LOGREG, TAG_MLP};
use crate::error::{Error, Result};

use super::{ModelSpec, ParamVector, Segment};

/// A decoded checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_tag: u16,
    pub params: ParamVector,
}

pub fn arch_tag(spec: &ModelSpec) -> u16 {
    match spec {
        ModelSpec::LogReg { .. } => TAG_LOGREG,
        ModelSpec::Mlp { .. } => TAG_MLP,
    }
}

pub fn checkpoint_bytes(spec: &ModelSpec, params: &ParamVector) -> Result<Vec<u8>> {
    spec.check_params(params)?;
    container_for(arch_tag(spec), params).encode()
}

fn container_for(arch_tag: u16, params: &ParamVector) -> Container {
    Container {
        arch_tag,
        segments: params
            .layout()
            .iter()
            .map(|s| SegmentHeader { name: s.name.clone(), shape: s.shape.clone() })
            .collect(),
        values: params.values().to_vec(),
    }
}

pub fn save_checkpoint(path: &Path, spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    let bytes = checkpoint_bytes(spec, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::read(path)?;
    if c.arch_tag != TAG_LOGREG && c.arch_tag != TAG_MLP {
        return Err(Error::Format(format!("arch tag {:#x} is not a model", c.arch_tag)));
    }
    let mut offset = 0;
    let layout = c
        .segments
        .into_iter()
        .map(|h| {
            let seg = Segment { name: h.name, shape: h.shape, offset };
            offset += seg.numel();
            seg
        })
        .collect();
    Ok(Checkpoint { arch_tag: c.arch_tag, params: ParamVector::new(c.values, layout)? })
}

impl Checkpoint {
    /// Checks the file matches `spec` and returns its parameters.
    pub fn into_params_for(self, spec: &ModelSpec) -> Result<ParamVector> {
        if self.arch_tag != arch_tag(spec) {
            return Err(Error::Format(format!("checkpoint arch tag {} does not match {spec:?}", self.arch_tag)));
        }
        spec.check_params(&self.params).map_err(|e| Error::Format(e.to_string()))?;
        Ok(self.params)
    }
}
