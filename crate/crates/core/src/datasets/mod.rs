//! Multi-domain labeled datasets and the ID/OOD protocol split.

mod colored_mnist;
pub mod idx;
mod split;
mod synthetic;

pub use colored_mnist::{
    build_colored_mnist, build_colored_mnist_from, mnist_sources, write_surrogate_mnist, ColoredMnist,
    ColoredMnistOptions,
};
pub use split::{min_ood_classes, split_id_ood, LabeledPool, Split};
pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Environment variable naming the directory that holds raw IDX files.
pub const DATA_DIR_ENV: &str = "MADOD_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub x: Vec<f64>,
    pub y: usize,
    pub domain: usize,
    pub latent_s: Option<Vec<f64>>,
    pub latent_v: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub instances: Vec<Instance>,
    pub num_classes: usize,
    pub domains: Vec<usize>,
    pub input_dim: usize,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        instances: Vec<Instance>,
        num_classes: usize,
        domains: Vec<usize>,
    ) -> Result<Self> {
        let input_dim = instances.first().map_or(0, |i| i.x.len());
        let synthetic = instances.first().is_some_and(|i| i.latent_s.is_some());
        for inst in &instances {
            if inst.y >= num_classes {
                return Err(Error::Unknown {
                    what: "class",
                    id: inst.y,
                });
            }
            if !domains.contains(&inst.domain) {
                return Err(Error::Unknown {
                    what: "domain",
                    id: inst.domain,
                });
            }
            if inst.x.len() != input_dim {
                return Err(Error::Dimension {
                    what: "instance features",
                    expected: input_dim,
                    actual: inst.x.len(),
                });
            }
            if inst.latent_s.is_some() != synthetic || inst.latent_v.is_some() != synthetic {
                return Err(Error::Config(
                    "latent factors must be present on all instances or none".into(),
                ));
            }
        }
        Ok(Self {
            name: name.into(),
            instances,
            num_classes,
            domains,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn is_synthetic(&self) -> bool {
        self.instances.first().is_some_and(|i| i.latent_s.is_some())
    }

    /// Feature rows of the given instances as an `n × input_dim` matrix.
    pub fn features(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.input_dim);
        for &i in idx {
            data.extend_from_slice(&self.instances[i].x);
        }
        Tensor::matrix(idx.len(), self.input_dim, data).expect("rows share input_dim")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.instances[i].y).collect()
    }

    pub fn count(&self, class: usize, domain: usize) -> usize {
        self.instances
            .iter()
            .filter(|i| i.y == class && i.domain == domain)
            .count()
    }
}
