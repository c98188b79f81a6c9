//! Unified label space over several datasets and the joint two-term loss.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::ops;

pub const IGNORE: u8 = 255;

/// Exact-name union of per-dataset class lists, in first-seen order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
    datasets: Vec<(String, Vec<String>)>,
}

/// Unified ↔ dataset-local id translation for one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapTable {
    pub dataset: String,
    /// `to_local[u]` is the local id of unified class `u`, if present.
    pub to_local: Vec<Option<usize>>,
    /// Unified ids of the dataset classes, in local order.
    pub members: Vec<usize>,
}

impl RemapTable {
    pub fn num_local(&self) -> usize {
        self.members.len()
    }

    pub fn num_unified(&self) -> usize {
        self.to_local.len()
    }
}

pub fn build_unified_space<S: AsRef<str>, C: AsRef<str>>(datasets: &[(S, Vec<C>)]) -> Result<LabelSpace> {
    if datasets.is_empty() {
        return validation("no datasets given");
    }
    let mut names: Vec<String> = Vec::new();
    let mut out = Vec::with_capacity(datasets.len());
    for (ds, classes) in datasets {
        let ds = ds.as_ref().to_string();
        if classes.is_empty() {
            return validation(format!("dataset `{ds}` has an empty class list"));
        }
        if out.iter().any(|(d, _): &(String, Vec<String>)| *d == ds) {
            return validation(format!("dataset `{ds}` listed twice"));
        }
        let classes: Vec<String> = classes.iter().map(|c| c.as_ref().to_string()).collect();
        for (i, c) in classes.iter().enumerate() {
            if classes[..i].contains(c) {
                return validation(format!("dataset `{ds}` lists class `{c}` twice"));
            }
            if !names.contains(c) {
                names.push(c.clone());
            }
        }
        out.push((ds, classes));
    }
    if names.len() >= IGNORE as usize {
        return validation(format!("{} unified classes collide with the ignore index", names.len()));
    }
    Ok(LabelSpace { names, datasets: out })
}

impl LabelSpace {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dataset_names(&self) -> impl Iterator<Item = &str> {
        self.datasets.iter().map(|(d, _)| d.as_str())
    }

    pub fn dataset_classes(&self, dataset: &str) -> Result<&[String]> {
        self.datasets
            .iter()
            .find(|(d, _)| d == dataset)
            .map(|(_, c)| c.as_slice())
            .ok_or_else(|| Error::Data(format!("unknown dataset `{dataset}`")))
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Per-dataset membership over unified ids.
    pub fn mask(&self, dataset: &str) -> Result<Vec<bool>> {
        Ok(self.table(dataset)?.to_local.iter().map(Option::is_some).collect())
    }

    pub fn table(&self, dataset: &str) -> Result<RemapTable> {
        let classes = self.dataset_classes(dataset)?;
        let members: Vec<usize> = classes.iter().map(|c| self.id(c).unwrap()).collect();
        let mut to_local = vec![None; self.names.len()];
        for (local, &u) in members.iter().enumerate() {
            to_local[u] = Some(local);
        }
        Ok(RemapTable { dataset: dataset.to_string(), to_local, members })
    }

    pub fn tables(&self) -> BTreeMap<String, RemapTable> {
        self.dataset_names().map(|d| (d.to_string(), self.table(d).unwrap())).collect()
    }

    /// Human-readable list file: a `[unified]` section then one section per dataset.
    pub fn to_manifest(&self) -> String {
        let mut s = String::from("[unified]\n");
        for n in &self.names {
            s.push_str(n);
            s.push('\n');
        }
        for (d, classes) in &self.datasets {
            s.push_str(&format!("\n[dataset {d}]\n"));
            for c in classes {
                s.push_str(c);
                s.push('\n');
            }
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut unified = Vec::new();
        let mut datasets: Vec<(String, Vec<String>)> = Vec::new();
        let mut in_unified = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line == "[unified]" {
                in_unified = true;
            } else if let Some(d) = line.strip_prefix("[dataset ").and_then(|l| l.strip_suffix(']')) {
                in_unified = false;
                datasets.push((d.to_string(), Vec::new()));
            } else if in_unified {
                unified.push(line.to_string());
            } else if let Some((_, c)) = datasets.last_mut() {
                c.push(line.to_string());
            } else {
                return Err(Error::Data(format!("manifest line outside any section: `{line}`")));
            }
        }
        let space = build_unified_space(&datasets)?;
        if space.names != unified {
            return Err(Error::Data("manifest unified list disagrees with its dataset sections".into()));
        }
        Ok(space)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_manifest())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_manifest(&std::fs::read_to_string(path)?)
    }
}

/// Unified label ids to dataset-local ids; absent classes become [`IGNORE`].
pub fn remap_labels(labels: &[u8], table: &RemapTable) -> Result<Vec<u8>> {
    labels
        .iter()
        .map(|&l| {
            if l == IGNORE {
                Ok(IGNORE)
            } else if (l as usize) < table.num_unified() {
                Ok(table.to_local[l as usize].map_or(IGNORE, |x| x as u8))
            } else {
                Err(Error::Data(format!("label {l} outside the {}-class unified space", table.num_unified())))
            }
        })
        .collect()
}

/// Gathers the dataset's channels (dim 1) from unified logits.
pub fn remap_logits(logits: &Tensor, table: &RemapTable) -> Result<Tensor> {
    if logits.dims().get(1) != Some(&table.num_unified()) {
        return validation(format!("logits {:?} do not have {} unified channels", logits.dims(), table.num_unified()));
    }
    let idx: Vec<u32> = table.members.iter().map(|&u| u as u32).collect();
    Ok(logits.index_select(&Tensor::new(idx.as_slice(), logits.device())?, 1)?)
}

/// Mean cross entropy over non-ignored pixels. `logits` is `B × K × H × W`,
/// `target` holds `B·H·W` ids in row-major order. Returns `(loss, valid pixels)`.
pub fn cross_entropy(logits: &Tensor, target: &[u8]) -> Result<(Tensor, usize)> {
    let (b, k, h, w) = logits.dims4()?;
    if target.len() != b * h * w {
        return validation(format!("target has {} pixels, logits {}", target.len(), b * h * w));
    }
    let mut idx = Vec::with_capacity(target.len());
    let mut weight = Vec::with_capacity(target.len());
    let mut valid = 0usize;
    for &t in target {
        if t == IGNORE {
            idx.push(0u32);
            weight.push(0.0);
        } else if (t as usize) < k {
            idx.push(t as u32);
            weight.push(1.0);
            valid += 1;
        } else {
            return Err(Error::Data(format!("label {t} outside {k} classes")));
        }
    }
    let flat = logits.permute((0, 2, 3, 1))?.reshape((b * h * w, k))?;
    let logp = ops::log_softmax_last_dim(&flat)?;
    let dev = logits.device();
    let picked = logp.gather(&Tensor::from_vec(idx, (b * h * w, 1), dev)?, 1)?.squeeze(1)?;
    let weight = Tensor::from_vec(weight, b * h * w, dev)?.to_dtype(logits.dtype())?;
    let total = (picked * weight)?.sum_all()?;
    Ok(((total * (-1.0 / valid.max(1) as f64))?, valid))
}

#[derive(Debug)]
pub struct JointLoss {
    pub loss: Tensor,
    /// Every pixel was ignored; `loss` is a zero that still carries the graph.
    pub all_ignored: bool,
}

/// Cross entropy in the unified space plus cross entropy after remapping both
/// logits and labels into the dataset's own space.
pub fn joint_loss(logits: &Tensor, target: &[u8], table: &RemapTable) -> Result<JointLoss> {
    let (unified, valid) = cross_entropy(logits, target)?;
    if valid == 0 {
        log::warn!("joint loss: every pixel is ignored for dataset {}", table.dataset);
        return Ok(JointLoss { loss: (logits.sum_all()? * 0.0)?, all_ignored: true });
    }
    let local_target = remap_labels(target, table)?;
    let (local, _) = cross_entropy(&remap_logits(logits, table)?, &local_target)?;
    Ok(JointLoss { loss: (unified + local)?, all_ignored: false })
}

/// Argmax over the dataset's own classes, returned as local ids.
pub fn predict_local(logits: &Tensor, table: &RemapTable) -> Result<Vec<u8>> {
    let local = remap_logits(logits, table)?;
    Ok(local.argmax(1)?.to_dtype(DType::U8)?.flatten_all()?.to_vec1::<u8>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn ab() -> LabelSpace {
        build_unified_space(&[("A", vec!["road", "car"]), ("B", vec!["car", "tree"])]).unwrap()
    }

    #[test]
    fn union_keeps_first_seen_order() {
        let s = ab();
        assert_eq!(s.names(), &["road", "car", "tree"]);
        assert_eq!(s.mask("A").unwrap(), vec![true, true, false]);
        assert_eq!(s.table("B").unwrap().members, vec![1, 2]);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let none: Vec<(&str, Vec<&str>)> = vec![];
        assert!(matches!(build_unified_space(&none), Err(Error::Validation(_))));
        let empty: Vec<(&str, Vec<&str>)> = vec![("A", vec![])];
        assert!(matches!(build_unified_space(&empty), Err(Error::Validation(_))));
    }

    #[test]
    fn single_dataset_is_identity() {
        let s = build_unified_space(&[("A", vec!["x", "y", "z"])]).unwrap();
        let t = s.table("A").unwrap();
        assert_eq!(remap_labels(&[0, 2, 255, 1], &t).unwrap(), vec![0, 2, 255, 1]);
    }

    #[test]
    fn absent_class_maps_to_ignore_and_bad_ids_error() {
        let t = ab().table("A").unwrap();
        assert_eq!(remap_labels(&[2, 1, 0], &t).unwrap(), vec![IGNORE, 1, 0]);
        assert!(matches!(remap_labels(&[3], &t), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let s = ab();
        assert_eq!(LabelSpace::from_manifest(&s.to_manifest()).unwrap(), s);
        assert!(LabelSpace::from_manifest("stray\n").is_err());
    }

    #[test]
    fn uniform_logits_give_log_sizes() {
        let s = build_unified_space(&[("A", vec!["a", "b", "c", "d"]), ("B", vec!["e", "f", "g", "h", "i"])]).unwrap();
        let logits = Tensor::zeros((2, 9, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let target = vec![1u8; 18];
        let l = joint_loss(&logits, &target, &s.table("A").unwrap()).unwrap();
        let v = l.loss.to_scalar::<f64>().unwrap();
        assert!((v - (9f64.ln() + 4f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn all_ignored_is_flagged_zero() {
        let t = ab().table("A").unwrap();
        let logits = Tensor::ones((1, 3, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let l = joint_loss(&logits, &[IGNORE; 4], &t).unwrap();
        assert!(l.all_ignored);
        assert_eq!(l.loss.to_scalar::<f64>().unwrap(), 0.0);
    }
}
