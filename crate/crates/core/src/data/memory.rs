use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::confusion_for;
use crate::model::Model;
use crate::scalar::Scalar;

/// Rehearsal images kept from the first training subset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryStore {
    /// Index into the candidate set and its score, best first.
    pub entries: Vec<(usize, f64)>,
    pub samples: Vec<Sample>,
}

impl MemoryStore {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Labeled fraction of the image times `1 - mIoU` of `model` on it: images
/// that carry many old-class pixels the model still gets wrong rank first.
pub fn memory_score<T: Scalar>(model: &Model<T>, sample: &Sample) -> Result<f64> {
    let classes = model.class_list();
    let labeled = sample
        .labels
        .values()
        .iter()
        .filter(|v| classes.contains(v))
        .count();
    if labeled == 0 {
        return Ok(0.0);
    }
    let cm = confusion_for(model, std::slice::from_ref(sample), std::slice::from_ref(&classes), 1)?
        .pop()
        .expect("one subset requested");
    let miou = cm.miou(&classes)?.unwrap_or(0.0);
    Ok(labeled as f64 / sample.labels.len() as f64 * (1.0 - miou))
}

/// Top-`budget` candidates by [`memory_score`], ties to the lower index.
pub fn select_memory<T: Scalar>(
    candidates: &[Sample],
    model: &Model<T>,
    budget: usize,
) -> Result<MemoryStore> {
    if budget > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "memory budget {budget} exceeds {} candidate images",
            candidates.len()
        )));
    }
    if budget == 0 {
        return Ok(MemoryStore::default());
    }
    let mut scored = candidates
        .iter()
        .enumerate()
        .map(|(i, s)| Ok((i, memory_score(model, s)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(budget);
    let samples = scored.iter().map(|&(i, _)| candidates[i].clone()).collect();
    Ok(MemoryStore {
        entries: scored,
        samples,
    })
}
