//! Held-out evaluation: per-domain IoU tables and their CSV forms.
//!
//! Reporting groups the benchmark into four domains: the labeled source
//! split, the compound split cut into near and far halves by amplitude
//! distance, and the open split. This module is the only trained-path
//! consumer of compound and open label files; training itself never sees
//! them.

use std::path::Path;

use crate::curriculum::Predictor;
use crate::error::{Error, Result};
use crate::metrics::Confusion;
use crate::raster::Image;
use crate::spectrum::{domain_distance, source_profile};
use crate::synthdata::{load_split, Manifest, Split};

pub const DOMAIN_SOURCE: &str = "source";
pub const DOMAIN_NEAR: &str = "compound_near";
pub const DOMAIN_FAR: &str = "compound_far";
pub const DOMAIN_OPEN: &str = "open";

/// Amplitude distance of every compound image to the source profile,
/// ascending, ties broken by id so the order is total.
pub fn compound_distances(
    source: &[Image],
    compound: &[(String, Image)],
    beta: f64,
) -> Result<Vec<(String, f64)>> {
    let profile = source_profile(source, beta)?;
    let mut out = compound
        .iter()
        .map(|(id, img)| Ok((id.clone(), domain_distance(img, &profile)?)))
        .collect::<Result<Vec<(String, f64)>>>()?;
    out.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("distances are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(out)
}

/// IoU per class plus their mean for one reporting domain. Classes absent
/// from both prediction and reference carry no IoU.
#[derive(Debug, Clone)]
pub struct DomainScore {
    pub domain: String,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Load the labeled evaluation groups for a generated dataset. The
/// compound split is halved at its distance median: the far half is the
/// adaptation target the ablations compare on.
pub fn domain_groups(
    root: &Path,
    manifest: &Manifest,
    beta: f64,
) -> Result<Vec<(String, Vec<Image>)>> {
    let source = load_split(root, manifest, Split::Source, true)?;
    let compound_imgs = load_split(root, manifest, Split::Compound, true)?;
    let compound: Vec<(String, Image)> = manifest
        .split_entries(Split::Compound)
        .map(|e| e.id.clone())
        .zip(compound_imgs)
        .collect();
    let open = load_split(root, manifest, Split::Open, true)?;

    let ranked = compound_distances(&source, &compound, beta)?;
    let n_far = ranked.len() / 2;
    let far_ids: std::collections::BTreeSet<&str> = ranked[ranked.len() - n_far..]
        .iter()
        .map(|(id, _)| id.as_str())
        .collect();
    let (mut near, mut far) = (Vec::new(), Vec::new());
    for (id, img) in compound {
        if far_ids.contains(id.as_str()) {
            far.push(img);
        } else {
            near.push(img);
        }
    }

    let mut groups = vec![(DOMAIN_SOURCE.to_string(), source)];
    groups.push((DOMAIN_NEAR.to_string(), near));
    groups.push((DOMAIN_FAR.to_string(), far));
    groups.push((DOMAIN_OPEN.to_string(), open));
    groups.retain(|(_, imgs)| !imgs.is_empty());
    Ok(groups)
}

/// Run a predictor over every group and accumulate one confusion table per
/// domain. Every image must be labeled.
pub fn evaluate_model(
    predictor: &dyn Predictor,
    groups: &[(String, Vec<Image>)],
    cls: usize,
) -> Result<Vec<DomainScore>> {
    let mut scores = Vec::with_capacity(groups.len());
    for (domain, images) in groups {
        let mut conf = Confusion::new(cls)?;
        for img in images {
            let truth = img
                .labels
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("{domain}: unlabeled image in evaluation")))?;
            let pred = predictor.predict_labels(img)?;
            conf.add(&pred, truth)?;
        }
        scores.push(DomainScore {
            domain: domain.clone(),
            iou: conf.iou(),
            miou: conf.miou()?,
        });
    }
    Ok(scores)
}

/// `domain,class,iou` rows; a class with no defined IoU leaves the value
/// empty rather than faking a zero.
pub fn scores_csv(scores: &[DomainScore]) -> String {
    let mut out = String::from("domain,class,iou\n");
    for s in scores {
        for (c, iou) in s.iou.iter().enumerate() {
            match iou {
                Some(v) => out.push_str(&format!("{},{},{}\n", s.domain, c, v)),
                None => out.push_str(&format!("{},{},\n", s.domain, c)),
            }
        }
    }
    out
}

/// Per-domain mean IoU, closed by an `all` row that averages the domain
/// rows themselves.
pub fn summary_csv(scores: &[DomainScore]) -> String {
    let mut out = String::from("domain,miou\n");
    for s in scores {
        out.push_str(&format!("{},{}\n", s.domain, s.miou));
    }
    if !scores.is_empty() {
        let mean = scores.iter().map(|s| s.miou).sum::<f64>() / scores.len() as f64;
        out.push_str(&format!("all,{mean}\n"));
    }
    out
}
