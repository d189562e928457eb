//! Distance-ordered training schedule.
//!
//! Compound images are sorted by their amplitude distance from the source
//! corpus and split into `k` equal stages, nearest first. Each stage also
//! gets a "fake source" pool: the `floor(n*(j-1)/(2k))` images nearest the
//! source, which by then sit in stages the model has already seen. Those
//! are pseudo-labeled by the current model at stage entry and mixed into
//! the labeled set.

use crate::error::{Error, Result};
use crate::raster::Image;

/// Anything that can produce per-pixel class predictions.
pub trait Predictor {
    fn predict_labels(&self, image: &Image) -> Result<Vec<u8>>;
}

/// Sorted stage layout over a ranked image list.
#[derive(Debug, Clone, PartialEq)]
pub struct Curriculum {
    /// `(image id, distance)` ascending by distance; length divisible by `k`.
    pub ordered: Vec<(String, f64)>,
    pub k: usize,
    /// Largest-distance items dropped to make the stage sizes equal.
    /// They stay eligible for evaluation, just not for staged training.
    pub dropped: Vec<(String, f64)>,
}

impl Curriculum {
    pub fn stage_len(&self) -> usize {
        self.ordered.len() / self.k
    }

    /// Stage `j` (1-based) as a slice of the ordered list.
    pub fn stage(&self, j: usize) -> Result<&[(String, f64)]> {
        if j == 0 || j > self.k {
            return Err(Error::Parameter(format!(
                "stage index {j} out of range 1..={}",
                self.k
            )));
        }
        let len = self.stage_len();
        Ok(&self.ordered[(j - 1) * len..j * len])
    }

    pub fn stages(&self) -> Vec<&[(String, f64)]> {
        (1..=self.k).map(|j| self.stage(j).expect("j in range")).collect()
    }
}

/// Sort by distance ascending (ties by id) and partition into `k` stages.
/// When `k` does not divide the list length, the `n mod k` largest-distance
/// items are dropped from staging.
pub fn build_curriculum(distances: &[(String, f64)], k: usize) -> Result<Curriculum> {
    if distances.is_empty() {
        return Err(Error::Parameter("cannot build a curriculum from zero images".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("stage count must be at least 1".into()));
    }
    if k > distances.len() {
        return Err(Error::Parameter(format!(
            "stage count {k} exceeds image count {}",
            distances.len()
        )));
    }
    if let Some((id, d)) = distances.iter().find(|(_, d)| !d.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite distance {d} for {id}")));
    }
    let mut ordered: Vec<(String, f64)> = distances.to_vec();
    ordered.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("finite checked above")
            .then_with(|| a.0.cmp(&b.0))
    });
    let keep = ordered.len() - ordered.len() % k;
    let dropped = ordered.split_off(keep);
    Ok(Curriculum { ordered, k, dropped })
}

/// Ids of the fake-source pool for stage `j` (1-based): the first
/// `floor(n*(j-1)/(2k))` ids of the ordered list. Empty for stage 1.
pub fn fake_source_ids(curriculum: &Curriculum, j: usize) -> Result<Vec<String>> {
    if j == 0 || j > curriculum.k {
        return Err(Error::Parameter(format!(
            "stage index {j} out of range 1..={}",
            curriculum.k
        )));
    }
    let n = curriculum.ordered.len();
    let count = n * (j - 1) / (2 * curriculum.k);
    Ok(curriculum.ordered[..count].iter().map(|(id, _)| id.clone()).collect())
}

/// One stage's pseudo-labeled pool.
#[derive(Debug, Clone)]
pub struct FakeSourceSet {
    pub stage: usize,
    /// `(image id, per-pixel pseudo-labels)` in pool order.
    pub members: Vec<(String, Vec<u8>)>,
    /// Which model state produced the labels.
    pub provenance: String,
}

/// Pseudo-label a pool with the given model. Labels are computed once here
/// and frozen for the stage; callers must not refresh them mid-stage.
pub fn materialize_fake_source(
    stage: usize,
    members: &[(String, &Image)],
    model: &dyn Predictor,
    provenance: &str,
) -> Result<FakeSourceSet> {
    let mut out = Vec::with_capacity(members.len());
    for (id, img) in members {
        out.push((id.clone(), model.predict_labels(img)?));
    }
    Ok(FakeSourceSet {
        stage,
        members: out,
        provenance: provenance.to_string(),
    })
}

/// Serialized curriculum artifact written by the ranking command.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct CurriculumFile {
    pub beta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub ordered: Vec<OrderedEntry>,
    pub stages: Vec<Vec<String>>,
    pub fake_source_per_stage: Vec<Vec<String>>,
    /// Items excluded from staging for divisibility; kept so the full
    /// ranked list can be reconstructed (single-stage reruns need it).
    #[serde(default)]
    pub dropped: Vec<OrderedEntry>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct OrderedEntry {
    pub id: String,
    pub delta: f64,
}

impl CurriculumFile {
    pub fn from_curriculum(curriculum: &Curriculum, beta: f64) -> Result<Self> {
        let ordered = curriculum
            .ordered
            .iter()
            .map(|(id, d)| OrderedEntry { id: id.clone(), delta: *d })
            .collect();
        let stages = curriculum
            .stages()
            .iter()
            .map(|s| s.iter().map(|(id, _)| id.clone()).collect())
            .collect();
        let fake_source_per_stage = (1..=curriculum.k)
            .map(|j| fake_source_ids(curriculum, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(CurriculumFile {
            beta,
            k: curriculum.k,
            ordered,
            stages,
            fake_source_per_stage,
            dropped: curriculum
                .dropped
                .iter()
                .map(|(id, d)| OrderedEntry { id: id.clone(), delta: *d })
                .collect(),
        })
    }

    pub fn to_curriculum(&self) -> Result<Curriculum> {
        let ordered: Vec<(String, f64)> = self
            .ordered
            .iter()
            .map(|e| (e.id.clone(), e.delta))
            .collect();
        if self.k == 0 || ordered.is_empty() || ordered.len() % self.k != 0 {
            return Err(Error::Format(format!(
                "curriculum file is inconsistent: {} ids across {} stages",
                ordered.len(),
                self.k
            )));
        }
        Ok(Curriculum {
            ordered,
            k: self.k,
            dropped: self.dropped.iter().map(|e| (e.id.clone(), e.delta)).collect(),
        })
    }

    /// The full ranked list, staged and dropped items together.
    pub fn all_ranked(&self) -> Vec<(String, f64)> {
        self.ordered
            .iter()
            .chain(self.dropped.iter())
            .map(|e| (e.id.clone(), e.delta))
            .collect()
    }
}
