use super::DomainDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index partition of one (test domain, OOD class) protocol cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub test_domain: usize,
    pub train_domains: Vec<usize>,
    pub ood_class: usize,
    pub train: Vec<usize>,
    pub id_test: Vec<usize>,
    pub ood_test: Vec<usize>,
}

/// Smallest number of OOD-class choices that covers 40% of `k` classes.
pub fn min_ood_classes(k: usize) -> usize {
    (2 * k).div_ceil(5)
}

pub fn split_id_ood(ds: &DomainDataset, test_domain: usize, ood_class: usize) -> Result<Split> {
    if ood_class >= ds.num_classes {
        return Err(Error::Unknown {
            what: "class",
            id: ood_class,
        });
    }
    if !ds.domains.contains(&test_domain) {
        return Err(Error::Unknown {
            what: "domain",
            id: test_domain,
        });
    }
    let train_domains: Vec<usize> = ds.domains.iter().copied().filter(|&d| d != test_domain).collect();
    let (mut train, mut id_test, mut ood_test) = (Vec::new(), Vec::new(), Vec::new());
    for (i, inst) in ds.instances.iter().enumerate() {
        match (inst.domain == test_domain, inst.y == ood_class) {
            (true, true) => ood_test.push(i),
            (true, false) => id_test.push(i),
            (false, false) => train.push(i),
            (false, true) => {}
        }
    }
    for (name, pool) in [
        ("train pool", &train),
        ("ID test pool", &id_test),
        ("OOD test pool", &ood_test),
    ] {
        if pool.is_empty() {
            return Err(Error::Empty(format!(
                "{name} (test domain {test_domain}, OOD class {ood_class})"
            )));
        }
    }
    Ok(Split {
        test_domain,
        train_domains,
        ood_class,
        train,
        id_test,
        ood_test,
    })
}

/// Materialized labeled rows with labels renumbered contiguously over the
/// in-distribution classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPool {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub domain: Vec<usize>,
    pub num_classes: usize,
    /// Original class id of each contiguous label.
    pub class_ids: Vec<usize>,
}

impl LabeledPool {
    /// Rows `idx` of `ds`, keeping only classes in `class_ids` (renumbered in
    /// that order).
    pub fn from_indices(ds: &DomainDataset, idx: &[usize], class_ids: &[usize]) -> Result<Self> {
        let mut keep = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            if let Some(label) = class_ids.iter().position(|&c| c == ds.instances[i].y) {
                keep.push(i);
                y.push(label);
            }
        }
        Ok(Self {
            x: ds.features(&keep),
            domain: keep.iter().map(|&i| ds.instances[i].domain).collect(),
            y,
            num_classes: class_ids.len(),
            class_ids: class_ids.to_vec(),
        })
    }

    /// Train and ID-test pools of a split, labeled over the ID classes.
    pub fn for_split(ds: &DomainDataset, split: &Split) -> Result<(Self, Self)> {
        let ids: Vec<usize> = (0..ds.num_classes).filter(|&c| c != split.ood_class).collect();
        Ok((
            Self::from_indices(ds, &split.train, &ids)?,
            Self::from_indices(ds, &split.id_test, &ids)?,
        ))
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        Tensor::matrix(idx.len(), d, data).expect("rows share dim")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.y[i]).collect()
    }

    /// Row indices of each class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.y.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}
