//! Segmentation model, discriminator, and the training losses.
//!
//! The segmentation path is: a small stack of 3x3 convolutions with leaky
//! ReLU after every layer, an optional Hopfield retrieval applied
//! independently at each spatial location, a 1x1 linear classifier, and a
//! per-location softmax. The discriminator is a second conv stack that
//! maps a probability map to a per-location two-way softmax where channel
//! 1 means "looks like source".
//!
//! All losses are raw sums over locations (no averaging); learning rates
//! absorb the scale. Probabilities are clamped at 1e-12 before any log,
//! and a clamped location contributes zero gradient.
//!
//! Backward passes are hand-written and exact; `full_objective_grads`
//! exposes the gradient of the combined objective as one pure function of
//! all parameters so it can be validated against finite differences.

use std::path::Path;

use crate::artifact;
use crate::curriculum::Predictor;
use crate::error::{Error, Result};
use crate::hopfield::{HopfieldGrads, HopfieldMemory, LocCache, Snapshot};
use crate::nn::{
    leaky_relu, leaky_relu_grad, softmax_backward, softmax_inplace, Conv3x3, ConvGrads, Grid,
};
use crate::raster::Image;
use crate::seed::{seeded_rng, uniform_symmetric};

pub const PROB_FLOOR: f64 = 1e-12;

/// Architecture of the segmentation model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SegConfig {
    pub in_channels: usize,
    /// Channel widths of the hidden encoder convolutions; a final
    /// convolution to `feature_dim` is always appended.
    pub hidden_channels: Vec<usize>,
    pub feature_dim: usize,
    pub cls: usize,
    pub leaky_slope: f64,
    pub hopfield: Option<HopfieldSpec>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HopfieldSpec {
    pub memory_size: usize,
    pub similarity_dim: usize,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub cfg: SegConfig,
    pub seed: u64,
    pub convs: Vec<Conv3x3>,
    pub hopfield: Option<HopfieldMemory>,
    /// 1x1 classifier, `cls x feature_dim` row-major, plus bias.
    pub cls_w: Vec<f64>,
    pub cls_b: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
pub struct SegCache {
    input: Grid,
    pre: Vec<Grid>,
    act: Vec<Grid>,
    hop_snap: Option<Snapshot>,
    hop_caches: Vec<LocCache>,
    features: Grid,
    pub probs: Grid,
}

#[derive(Debug, Clone)]
pub struct SegGrads {
    pub convs: Vec<ConvGrads>,
    pub hopfield: Option<HopfieldGrads>,
    pub cls_w: Vec<f64>,
    pub cls_b: Vec<f64>,
}

impl SegModel {
    /// Seeded init. Independent derived streams per component, so two
    /// models that share a seed and differ only in the Hopfield layer
    /// still draw identical encoder and classifier weights.
    pub fn init(cfg: SegConfig, seed: u64) -> Result<Self> {
        if cfg.cls < 2 {
            return Err(Error::Parameter(format!("need at least 2 classes, got {}", cfg.cls)));
        }
        if cfg.in_channels == 0 || cfg.feature_dim == 0 {
            return Err(Error::Parameter("channel widths must be positive".into()));
        }
        if !(cfg.leaky_slope.is_finite()) {
            return Err(Error::Parameter("leaky slope must be finite".into()));
        }
        let mut enc_rng = seeded_rng(seed, "encoder");
        let mut widths = vec![cfg.in_channels];
        widths.extend(cfg.hidden_channels.iter().copied());
        widths.push(cfg.feature_dim);
        let convs = widths
            .windows(2)
            .map(|w| Conv3x3::init(w[0], w[1], &mut enc_rng))
            .collect();
        let hopfield = match &cfg.hopfield {
            Some(spec) => {
                let mut rng = seeded_rng(seed, "hopfield");
                Some(HopfieldMemory::init(
                    spec.memory_size,
                    cfg.feature_dim,
                    spec.similarity_dim,
                    spec.tau,
                    &mut rng,
                )?)
            }
            None => None,
        };
        let mut cls_rng = seeded_rng(seed, "classifier");
        let scale = 1.0 / (cfg.feature_dim as f64).sqrt();
        let cls_w = (0..cfg.cls * cfg.feature_dim)
            .map(|_| uniform_symmetric(&mut cls_rng, scale))
            .collect();
        let cls_b = vec![0.0; cfg.cls];
        Ok(SegModel {
            cfg,
            seed,
            convs,
            hopfield,
            cls_w,
            cls_b,
        })
    }

    pub fn forward(&self, img: &Image) -> Result<(Grid, SegCache)> {
        if img.channels != self.cfg.in_channels {
            return Err(Error::InvalidInput(format!(
                "image has {} channels, model expects {}",
                img.channels, self.cfg.in_channels
            )));
        }
        let input = Grid {
            height: img.height,
            width: img.width,
            channels: img.channels,
            data: img.pixels.clone(),
        };
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut act = Vec::with_capacity(self.convs.len());
        let mut cur = input.clone();
        for conv in &self.convs {
            let p = conv.forward(&cur);
            let mut a = p.clone();
            for v in a.data.iter_mut() {
                *v = leaky_relu(*v, self.cfg.leaky_slope);
            }
            pre.push(p);
            cur = a.clone();
            act.push(a);
        }
        let enc_out = act.last().expect("at least one conv").clone();
        let locations = enc_out.locations();
        let d = self.cfg.feature_dim;

        let (features, hop_snap, hop_caches) = match &self.hopfield {
            Some(mem) => {
                let snap = mem.snapshot();
                let mut features = Grid::zeros(enc_out.height, enc_out.width, d);
                let mut caches = Vec::with_capacity(locations);
                for loc in 0..locations {
                    let z = &enc_out.data[loc * d..(loc + 1) * d];
                    let (zhat, cache) = mem.forward_with(&snap, z);
                    features.data[loc * d..(loc + 1) * d].copy_from_slice(&zhat);
                    caches.push(cache);
                }
                (features, Some(snap), caches)
            }
            None => (enc_out.clone(), None, Vec::new()),
        };

        let mut probs = Grid::zeros(features.height, features.width, self.cfg.cls);
        for loc in 0..locations {
            let feat = &features.data[loc * d..(loc + 1) * d];
            let logits = &mut probs.data[loc * self.cfg.cls..(loc + 1) * self.cfg.cls];
            for k in 0..self.cfg.cls {
                let mut acc = self.cls_b[k];
                for l in 0..d {
                    acc += self.cls_w[k * d + l] * feat[l];
                }
                logits[k] = acc;
            }
            softmax_inplace(logits);
        }
        let cache = SegCache {
            input,
            pre,
            act,
            hop_snap,
            hop_caches,
            features,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    /// Per-location class probability map.
    pub fn seg_forward(&self, img: &Image) -> Result<Grid> {
        self.forward(img).map(|(p, _)| p)
    }

    pub fn grads(&self) -> SegGrads {
        SegGrads {
            convs: self.convs.iter().map(|c| c.grads()).collect(),
            hopfield: self.hopfield.as_ref().map(HopfieldGrads::zeros),
            cls_w: vec![0.0; self.cls_w.len()],
            cls_b: vec![0.0; self.cls_b.len()],
        }
    }

    /// Accumulate parameter gradients given the gradient at the classifier
    /// logits. Frozen Hopfield parameters receive exactly zero.
    pub fn backward_into(&self, cache: &SegCache, dlogits: &Grid, grads: &mut SegGrads) {
        let d = self.cfg.feature_dim;
        let cls = self.cfg.cls;
        let locations = cache.features.locations();

        // classifier
        let mut dfeat = Grid::zeros(cache.features.height, cache.features.width, d);
        for loc in 0..locations {
            let feat = &cache.features.data[loc * d..(loc + 1) * d];
            let dl = &dlogits.data[loc * cls..(loc + 1) * cls];
            let df = &mut dfeat.data[loc * d..(loc + 1) * d];
            for k in 0..cls {
                let g = dl[k];
                grads.cls_b[k] += g;
                if g == 0.0 {
                    continue;
                }
                for l in 0..d {
                    grads.cls_w[k * d + l] += g * feat[l];
                    df[l] += self.cls_w[k * d + l] * g;
                }
            }
        }

        // retrieval layer
        let enc_out = cache.act.last().expect("at least one conv");
        let mut dz = match (&self.hopfield, &cache.hop_snap) {
            (Some(mem), Some(snap)) => {
                let hop_grads = grads.hopfield.as_mut().expect("grads match model");
                let mut dz = Grid::zeros(enc_out.height, enc_out.width, d);
                for loc in 0..locations {
                    let z = &enc_out.data[loc * d..(loc + 1) * d];
                    let upstream = &dfeat.data[loc * d..(loc + 1) * d];
                    let dzi = mem.backward_with(snap, z, &cache.hop_caches[loc], upstream, hop_grads);
                    dz.data[loc * d..(loc + 1) * d].copy_from_slice(&dzi);
                }
                dz
            }
            _ => dfeat,
        };

        // encoder, last layer first
        for i in (0..self.convs.len()).rev() {
            let mut dpre = dz;
            for (g, p) in dpre.data.iter_mut().zip(cache.pre[i].data.iter()) {
                *g *= leaky_relu_grad(*p, self.cfg.leaky_slope);
            }
            let below = if i == 0 { &cache.input } else { &cache.act[i - 1] };
            dz = self.convs[i].backward(below, &dpre, &mut grads.convs[i]);
        }
    }

    // --- flat parameter plumbing -----------------------------------------
    //
    // Order: conv weights/biases in layer order, then Hopfield patterns,
    // query, key, value projections, then classifier weight and bias.
    // Checkpoints, momentum buffers, and finite-difference checks all use
    // this order.

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        for c in &self.convs {
            n += c.weight.len() + c.bias.len();
        }
        if let Some(m) = &self.hopfield {
            n += m.m.len() + m.w_q.len() + m.w_k.len() + m.w_v.len();
        }
        n + self.cls_w.len() + self.cls_b.len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for c in &self.convs {
            out.extend_from_slice(&c.weight);
            out.extend_from_slice(&c.bias);
        }
        if let Some(m) = &self.hopfield {
            out.extend_from_slice(&m.m);
            out.extend_from_slice(&m.w_q);
            out.extend_from_slice(&m.w_k);
            out.extend_from_slice(&m.w_v);
        }
        out.extend_from_slice(&self.cls_w);
        out.extend_from_slice(&self.cls_b);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::InvalidInput(format!(
                "parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[at..at + dst.len()]);
            at += dst.len();
        };
        for c in &mut self.convs {
            take(&mut c.weight);
            take(&mut c.bias);
        }
        if let Some(m) = &mut self.hopfield {
            take(&mut m.m);
            take(&mut m.w_q);
            take(&mut m.w_k);
            take(&mut m.w_v);
        }
        take(&mut self.cls_w);
        take(&mut self.cls_b);
        Ok(())
    }

    /// Which flat entries are held fixed by the optimizer. Only a frozen
    /// Hopfield layer pins anything: patterns, key and value projections.
    /// The query projection stays trainable.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_params()];
        if let Some(m) = &self.hopfield {
            if m.frozen {
                let mut at = 0;
                for c in &self.convs {
                    at += c.weight.len() + c.bias.len();
                }
                for e in mask.iter_mut().skip(at).take(m.m.len()) {
                    *e = true;
                }
                at += m.m.len() + m.w_q.len(); // patterns frozen, query trainable
                for e in mask.iter_mut().skip(at).take(m.w_k.len() + m.w_v.len()) {
                    *e = true;
                }
            }
        }
        mask
    }

    pub fn save(&self, path: &Path, stage: &str) -> Result<()> {
        let hop = self.hopfield.as_ref().map(|m| {
            serde_json::json!({
                "M_N": m.m_n,
                "C_s": m.c_s,
                "tau": m.tau,
                "frozen": m.frozen,
            })
        });
        let header = serde_json::json!({
            "kind": "seg_model",
            "in_channels": self.cfg.in_channels,
            "hidden_channels": self.cfg.hidden_channels,
            "feature_dim": self.cfg.feature_dim,
            "cls": self.cfg.cls,
            "leaky_slope": self.cfg.leaky_slope,
            "hopfield": hop,
            "seed": self.seed,
            "stage": stage,
        });
        let flat = self.flat_params();
        artifact::write_blob(path, &header, &[&flat])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = artifact::read_blob(path)?;
        if header["kind"] != "seg_model" {
            return Err(Error::Format(format!(
                "{}: not a segmentation model checkpoint",
                path.display()
            )));
        }
        let get_u = |v: &serde_json::Value, k: &str| -> Result<usize> {
            v[k].as_u64()
                .map(|x| x as usize)
                .ok_or_else(|| Error::Format(format!("{}: header missing {k}", path.display())))
        };
        let hopfield = if header["hopfield"].is_null() {
            None
        } else {
            let h = &header["hopfield"];
            Some(HopfieldSpec {
                memory_size: get_u(h, "M_N")?,
                similarity_dim: get_u(h, "C_s")?,
                tau: h["tau"]
                    .as_f64()
                    .ok_or_else(|| Error::Format("hopfield header missing tau".into()))?,
            })
        };
        let frozen = header["hopfield"]["frozen"].as_bool().unwrap_or(false);
        let cfg = SegConfig {
            in_channels: get_u(&header, "in_channels")?,
            hidden_channels: header["hidden_channels"]
                .as_array()
                .ok_or_else(|| Error::Format("header missing hidden_channels".into()))?
                .iter()
                .map(|v| v.as_u64().map(|x| x as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Format("bad hidden_channels".into()))?,
            feature_dim: get_u(&header, "feature_dim")?,
            cls: get_u(&header, "cls")?,
            leaky_slope: header["leaky_slope"]
                .as_f64()
                .ok_or_else(|| Error::Format("header missing leaky_slope".into()))?,
            hopfield,
        };
        let seed = header["seed"]
            .as_u64()
            .ok_or_else(|| Error::Format("header missing seed".into()))?;
        let mut model = SegModel::init(cfg, seed)?;
        model.set_flat_params(&payload)?;
        if frozen {
            if let Some(m) = &mut model.hopfield {
                m.freeze();
            }
        }
        Ok(model)
    }
}

impl SegGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend_from_slice(&c.weight);
            out.extend_from_slice(&c.bias);
        }
        if let Some(h) = &self.hopfield {
            out.extend_from_slice(&h.m);
            out.extend_from_slice(&h.w_q);
            out.extend_from_slice(&h.w_k);
            out.extend_from_slice(&h.w_v);
        }
        out.extend_from_slice(&self.cls_w);
        out.extend_from_slice(&self.cls_b);
        out
    }
}

impl Predictor for SegModel {
    /// Per-pixel argmax; ties resolve to the lowest class id.
    fn predict_labels(&self, image: &Image) -> Result<Vec<u8>> {
        let probs = self.seg_forward(image)?;
        let cls = self.cfg.cls;
        let mut labels = Vec::with_capacity(probs.locations());
        for loc in 0..probs.locations() {
            let p = &probs.data[loc * cls..(loc + 1) * cls];
            let mut best = 0usize;
            for k in 1..cls {
                if p[k] > p[best] {
                    best = k;
                }
            }
            labels.push(best as u8);
        }
        Ok(labels)
    }
}

// --- discriminator --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiscConfig {
    pub in_channels: usize,
    pub hidden_channels: Vec<usize>,
    pub leaky_slope: f64,
}

/// Per-location source/target classifier over probability maps.
/// Output channel 1 is the "source" vote, channel 0 "target".
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub cfg: DiscConfig,
    pub convs: Vec<Conv3x3>,
}

pub struct DiscCache {
    input: Grid,
    pre: Vec<Grid>,
    act: Vec<Grid>,
    pub probs: Grid,
}

#[derive(Debug, Clone)]
pub struct DiscGrads {
    pub convs: Vec<ConvGrads>,
}

impl Discriminator {
    pub fn init(cfg: DiscConfig, seed: u64) -> Result<Self> {
        if cfg.in_channels == 0 {
            return Err(Error::Parameter("discriminator input width must be positive".into()));
        }
        let mut rng = seeded_rng(seed, "discriminator");
        let mut widths = vec![cfg.in_channels];
        widths.extend(cfg.hidden_channels.iter().copied());
        widths.push(2);
        let convs = widths
            .windows(2)
            .map(|w| Conv3x3::init(w[0], w[1], &mut rng))
            .collect();
        Ok(Discriminator { cfg, convs })
    }

    pub fn forward(&self, input: &Grid) -> Result<(Grid, DiscCache)> {
        if input.channels != self.cfg.in_channels {
            return Err(Error::InvalidInput(format!(
                "discriminator expects {} channels, got {}",
                self.cfg.in_channels, input.channels
            )));
        }
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut act = Vec::with_capacity(self.convs.len());
        let mut cur = input.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let p = conv.forward(&cur);
            let mut a = p.clone();
            if i != last {
                for v in a.data.iter_mut() {
                    *v = leaky_relu(*v, self.cfg.leaky_slope);
                }
            }
            pre.push(p);
            cur = a.clone();
            act.push(a);
        }
        let mut probs = cur;
        for loc in 0..probs.locations() {
            softmax_inplace(&mut probs.data[loc * 2..(loc + 1) * 2]);
        }
        let cache = DiscCache {
            input: input.clone(),
            pre,
            act,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    pub fn grads(&self) -> DiscGrads {
        DiscGrads {
            convs: self.convs.iter().map(|c| c.grads()).collect(),
        }
    }

    /// Backward from the gradient at the final (pre-softmax) logits.
    /// Returns the gradient with respect to the input probability map.
    pub fn backward_into(&self, cache: &DiscCache, dlogits: &Grid, grads: &mut DiscGrads) -> Grid {
        let last = self.convs.len() - 1;
        let mut dz = dlogits.clone();
        for i in (0..self.convs.len()).rev() {
            if i != last {
                for (g, p) in dz.data.iter_mut().zip(cache.pre[i].data.iter()) {
                    *g *= leaky_relu_grad(*p, self.cfg.leaky_slope);
                }
            }
            let below = if i == 0 { &cache.input } else { &cache.act[i - 1] };
            dz = self.convs[i].backward(below, &dz, &mut grads.convs[i]);
        }
        dz
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for c in &self.convs {
            out.extend_from_slice(&c.weight);
            out.extend_from_slice(&c.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::InvalidInput(format!(
                "parameter vector has {} entries, discriminator has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for c in &mut self.convs {
            let (wn, bn) = (c.weight.len(), c.bias.len());
            c.weight.copy_from_slice(&flat[at..at + wn]);
            at += wn;
            c.bias.copy_from_slice(&flat[at..at + bn]);
            at += bn;
        }
        Ok(())
    }
}

impl DiscGrads {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend_from_slice(&c.weight);
            out.extend_from_slice(&c.bias);
        }
        out
    }
}

// --- losses ----------------------------------------------------------------

/// Pairwise (tree) reduction; deterministic, and exact when summing 2^k
/// identical terms, which the closed-form loss identities rely on.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

fn clamped_nll(p: f64) -> f64 {
    // only genuine underflow is floored; NaN must stay NaN so a diverged
    // run is visible in the loss instead of laundered by the clamp
    if p >= PROB_FLOOR {
        -p.ln()
    } else if p.is_nan() {
        p
    } else {
        -PROB_FLOOR.ln()
    }
}

/// Sum over locations of `-log p[label]`.
pub fn ce_loss(probs: &Grid, labels: &[u8]) -> Result<f64> {
    ce_grad(probs, labels).map(|(l, _)| l)
}

/// Loss plus gradient at the logits: `p - onehot(label)` per location,
/// zero where the clamp is active.
pub fn ce_grad(probs: &Grid, labels: &[u8]) -> Result<(f64, Grid)> {
    if labels.len() != probs.locations() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} locations",
            labels.len(),
            probs.locations()
        )));
    }
    let cls = probs.channels;
    let mut dlogits = Grid::zeros(probs.height, probs.width, cls);
    let mut terms = Vec::with_capacity(probs.locations());
    for (loc, &label) in labels.iter().enumerate() {
        let label = usize::from(label);
        if label >= cls {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {cls} classes"
            )));
        }
        let p = &probs.data[loc * cls..(loc + 1) * cls];
        terms.push(clamped_nll(p[label]));
        if p[label] >= PROB_FLOOR {
            let dl = &mut dlogits.data[loc * cls..(loc + 1) * cls];
            for k in 0..cls {
                dl[k] = p[k] - if k == label { 1.0 } else { 0.0 };
            }
        }
    }
    Ok((pairwise_sum(&terms), dlogits))
}

/// Cross-entropy against a constant class over a whole map.
fn const_class_grad(probs: &Grid, class: usize) -> (f64, Grid) {
    let cls = probs.channels;
    let mut dlogits = Grid::zeros(probs.height, probs.width, cls);
    let mut terms = Vec::with_capacity(probs.locations());
    for loc in 0..probs.locations() {
        let p = &probs.data[loc * cls..(loc + 1) * cls];
        terms.push(clamped_nll(p[class]));
        if p[class] >= PROB_FLOOR {
            let dl = &mut dlogits.data[loc * cls..(loc + 1) * cls];
            for k in 0..cls {
                dl[k] = p[k] - if k == class { 1.0 } else { 0.0 };
            }
        }
    }
    (pairwise_sum(&terms), dlogits)
}

fn check_disc_map(d: &Grid) -> Result<()> {
    if d.channels != 2 {
        return Err(Error::InvalidInput(format!(
            "discriminator maps have 2 channels, got {}",
            d.channels
        )));
    }
    Ok(())
}

/// Adversarial loss for the segmentation step: make target predictions
/// look like source, `-sum log d[..., 1]`.
pub fn adv_loss_seg(d_target: &Grid) -> Result<f64> {
    check_disc_map(d_target)?;
    Ok(const_class_grad(d_target, 1).0)
}

/// Discriminator loss: target maps labeled 0, labeled-set maps labeled 1.
pub fn adv_loss_disc(d_target: &Grid, d_labeled: &Grid) -> Result<f64> {
    check_disc_map(d_target)?;
    check_disc_map(d_labeled)?;
    Ok(const_class_grad(d_target, 0).0 + const_class_grad(d_labeled, 1).0)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_adv_seg: f64,
    pub l_adv_d: f64,
    pub lambda_adv: f64,
    pub total: f64,
}

/// `total = l_ce + lambda * (l_adv_seg + l_adv_d)`.
pub fn total_loss(l_ce: f64, l_adv_seg: f64, l_adv_d: f64, lambda_adv: f64) -> Result<LossReport> {
    if !(lambda_adv >= 0.0) || !lambda_adv.is_finite() {
        return Err(Error::Parameter(format!(
            "adversarial weight must be non-negative and finite, got {lambda_adv}"
        )));
    }
    Ok(LossReport {
        l_ce,
        l_adv_seg,
        l_adv_d,
        lambda_adv,
        total: l_ce + lambda_adv * (l_adv_seg + l_adv_d),
    })
}

/// Softmax backward for every location of a map.
pub fn grid_softmax_backward(probs: &Grid, dprobs: &Grid) -> Grid {
    let cls = probs.channels;
    let mut dlogits = Grid::zeros(probs.height, probs.width, cls);
    for loc in 0..probs.locations() {
        softmax_backward(
            &probs.data[loc * cls..(loc + 1) * cls],
            &dprobs.data[loc * cls..(loc + 1) * cls],
            &mut dlogits.data[loc * cls..(loc + 1) * cls],
        );
    }
    dlogits
}

// --- gradient assembly -------------------------------------------------------

/// Segmentation update direction: cross-entropy on the labeled image plus
/// `lambda` times the adversarial term on the target image, with the
/// discriminator held fixed. Returns both probability maps so the
/// discriminator step can reuse them without re-running the model.
pub fn seg_training_grads(
    model: &SegModel,
    disc: &Discriminator,
    labeled_img: &Image,
    labels: &[u8],
    target_img: &Image,
    lambda: f64,
) -> Result<(SegGrads, Grid, Grid, f64, f64)> {
    let mut grads = model.grads();
    let (probs_s, cache_s) = model.forward(labeled_img)?;
    let (l_ce, dlogits_s) = ce_grad(&probs_s, labels)?;
    model.backward_into(&cache_s, &dlogits_s, &mut grads);

    let (probs_t, cache_t) = model.forward(target_img)?;
    let (d_t, dcache_t) = disc.forward(&probs_t)?;
    let (l_adv_seg, mut dlogits_d) = const_class_grad(&d_t, 1);
    for g in dlogits_d.data.iter_mut() {
        *g *= lambda;
    }
    let mut scratch = disc.grads(); // discarded: the seg step never updates the discriminator
    let dprobs_t = disc.backward_into(&dcache_t, &dlogits_d, &mut scratch);
    let dlogits_t = grid_softmax_backward(&probs_t, &dprobs_t);
    model.backward_into(&cache_t, &dlogits_t, &mut grads);

    Ok((grads, probs_s, probs_t, l_ce, l_adv_seg))
}

/// Discriminator update direction on detached probability maps.
pub fn disc_training_grads(
    disc: &Discriminator,
    probs_target: &Grid,
    probs_labeled: &Grid,
) -> Result<(DiscGrads, f64)> {
    let mut grads = disc.grads();
    let (d_t, cache_t) = disc.forward(probs_target)?;
    let (loss_t, dlog_t) = const_class_grad(&d_t, 0);
    disc.backward_into(&cache_t, &dlog_t, &mut grads);
    let (d_s, cache_s) = disc.forward(probs_labeled)?;
    let (loss_s, dlog_s) = const_class_grad(&d_s, 1);
    disc.backward_into(&cache_s, &dlog_s, &mut grads);
    Ok((grads, loss_t + loss_s))
}

/// Gradient of the combined objective as one pure function of all
/// parameters: every dependency path is followed, including the
/// discriminator's effect on the adversarial terms and the model's effect
/// through the maps fed to the discriminator. This is the function the
/// finite-difference validation perturbs.
pub fn full_objective_grads(
    model: &SegModel,
    disc: &Discriminator,
    labeled_img: &Image,
    labels: &[u8],
    target_img: &Image,
    lambda: f64,
) -> Result<(SegGrads, DiscGrads, LossReport)> {
    let mut seg_grads = model.grads();
    let mut disc_grads = disc.grads();

    let (probs_s, cache_s) = model.forward(labeled_img)?;
    let (probs_t, cache_t) = model.forward(target_img)?;
    let (d_t, dcache_t) = disc.forward(&probs_t)?;
    let (d_s, dcache_s) = disc.forward(&probs_s)?;

    let (l_ce, dlogits_ce) = ce_grad(&probs_s, labels)?;
    let (l_adv_seg, dlog_t1) = const_class_grad(&d_t, 1);
    let (l_adv_d_t, dlog_t0) = const_class_grad(&d_t, 0);
    let (l_adv_d_s, dlog_s1) = const_class_grad(&d_s, 1);
    let l_adv_d = l_adv_d_t + l_adv_d_s;

    // target branch: both adversarial terms flow through the same forward
    let mut dlog_t = dlog_t1;
    for (a, b) in dlog_t.data.iter_mut().zip(dlog_t0.data.iter()) {
        *a = lambda * (*a + b);
    }
    let dprobs_t = disc.backward_into(&dcache_t, &dlog_t, &mut disc_grads);
    let dlogits_t = grid_softmax_backward(&probs_t, &dprobs_t);
    model.backward_into(&cache_t, &dlogits_t, &mut seg_grads);

    // labeled branch: direct cross-entropy plus the discriminator path
    let mut dlog_s = dlog_s1;
    for g in dlog_s.data.iter_mut() {
        *g *= lambda;
    }
    let dprobs_s = disc.backward_into(&dcache_s, &dlog_s, &mut disc_grads);
    let dlogits_s_extra = grid_softmax_backward(&probs_s, &dprobs_s);
    let mut dlogits_s = dlogits_ce;
    for (a, b) in dlogits_s.data.iter_mut().zip(dlogits_s_extra.data.iter()) {
        *a += b;
    }
    model.backward_into(&cache_s, &dlogits_s, &mut seg_grads);

    let report = total_loss(l_ce, l_adv_seg, l_adv_d, lambda)?;
    Ok((seg_grads, disc_grads, report))
}

/// The combined objective value alone, for finite differencing.
pub fn full_objective_value(
    model: &SegModel,
    disc: &Discriminator,
    labeled_img: &Image,
    labels: &[u8],
    target_img: &Image,
    lambda: f64,
) -> Result<f64> {
    let probs_s = model.seg_forward(labeled_img)?;
    let probs_t = model.seg_forward(target_img)?;
    let (d_t, _) = disc.forward(&probs_t)?;
    let (d_s, _) = disc.forward(&probs_s)?;
    let l_ce = ce_loss(&probs_s, labels)?;
    let l_adv_seg = adv_loss_seg(&d_t)?;
    let l_adv_d = adv_loss_disc(&d_t, &d_s)?;
    Ok(total_loss(l_ce, l_adv_seg, l_adv_d, lambda)?.total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config(hopfield: bool) -> SegConfig {
        SegConfig {
            in_channels: 3,
            hidden_channels: vec![4],
            feature_dim: 5,
            cls: 3,
            leaky_slope: 0.1,
            hopfield: hopfield.then_some(HopfieldSpec {
                memory_size: 4,
                similarity_dim: 3,
                tau: 1.0,
            }),
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = seeded_rng(seed, "model-test");
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn zero_classifier_predicts_uniformly() {
        let mut model = SegModel::init(tiny_config(true), 1).unwrap();
        model.cls_w.iter_mut().for_each(|w| *w = 0.0);
        model.cls_b.iter_mut().for_each(|b| *b = 0.0);
        let probs = model.seg_forward(&random_image(4, 4, 2)).unwrap();
        for p in &probs.data {
            assert_eq!(*p, 1.0 / 3.0);
        }
    }

    #[test]
    fn probabilities_sum_to_one_everywhere() {
        let model = SegModel::init(tiny_config(true), 3).unwrap();
        let probs = model.seg_forward(&random_image(5, 6, 4)).unwrap();
        for loc in 0..probs.locations() {
            let s: f64 = probs.data[loc * 3..(loc + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hopfield_free_model_skips_retrieval() {
        let model = SegModel::init(tiny_config(false), 3).unwrap();
        assert!(model.hopfield.is_none());
        let probs = model.seg_forward(&random_image(4, 4, 5)).unwrap();
        assert_eq!(probs.channels, 3);
    }

    #[test]
    fn shared_seed_shares_encoder_across_architectures() {
        let with = SegModel::init(tiny_config(true), 9).unwrap();
        let without = SegModel::init(tiny_config(false), 9).unwrap();
        for (a, b) in with.convs.iter().zip(without.convs.iter()) {
            assert_eq!(a.weight, b.weight);
        }
        assert_eq!(with.cls_w, without.cls_w);
    }

    #[test]
    fn ce_of_perfect_prediction_is_zero() {
        let mut probs = Grid::zeros(2, 2, 3);
        for loc in 0..4 {
            probs.data[loc * 3 + 1] = 1.0;
        }
        assert_eq!(ce_loss(&probs, &[1, 1, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn ce_of_uniform_two_class_is_ln_two_per_location() {
        let mut probs = Grid::zeros(1, 1, 2);
        probs.data.copy_from_slice(&[0.5, 0.5]);
        let l = ce_loss(&probs, &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_matches_hand_summed_map() {
        // 1x2 map: p(label) = 0.7 and 0.2
        let probs = Grid {
            height: 1,
            width: 2,
            channels: 2,
            data: vec![0.7, 0.3, 0.8, 0.2],
        };
        let l = ce_loss(&probs, &[0, 1]).unwrap();
        let expect = -(0.7f64.ln()) - (0.2f64.ln());
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let probs = Grid::zeros(2, 2, 3);
        assert!(ce_loss(&probs, &[0, 1]).is_err());
        assert!(ce_loss(&probs, &[0, 1, 2, 3]).is_err());
    }

    #[test]
    fn adversarial_losses_have_closed_forms() {
        let n = 16usize; // power of two so the identities are exact
        let half = Grid {
            height: 4,
            width: 4,
            channels: 2,
            data: vec![0.5; n * 2],
        };
        let ln2 = std::f64::consts::LN_2;
        assert_eq!(adv_loss_seg(&half).unwrap(), n as f64 * ln2);
        assert_eq!(adv_loss_disc(&half, &half).unwrap(), 2.0 * n as f64 * ln2);

        let mut sure = Grid::zeros(4, 4, 2);
        for loc in 0..n {
            sure.data[loc * 2 + 1] = 1.0;
        }
        assert_eq!(adv_loss_seg(&sure).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_composes_linearly() {
        let r = total_loss(1.0, 2.0, 3.0, 0.001).unwrap();
        assert!((r.total - 1.005).abs() < 1e-15);
        assert_eq!(total_loss(1.5, 9.0, 9.0, 0.0).unwrap().total, 1.5);
        assert_eq!(total_loss(1.0, 1.0, 1.0, 1.0).unwrap().total, 3.0);
        assert!(total_loss(1.0, 1.0, 1.0, -0.1).is_err());
        assert!(total_loss(1.0, 1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn pairwise_sum_is_exact_for_equal_terms_at_powers_of_two() {
        let x = std::f64::consts::LN_2;
        for k in 0..8 {
            let n = 1usize << k;
            assert_eq!(pairwise_sum(&vec![x; n]), n as f64 * x);
        }
    }

    #[test]
    fn predict_labels_breaks_ties_toward_lower_ids() {
        let mut model = SegModel::init(tiny_config(false), 11).unwrap();
        model.cls_w.iter_mut().for_each(|w| *w = 0.0);
        model.cls_b.iter_mut().for_each(|b| *b = 0.0);
        let labels = model.predict_labels(&random_image(3, 3, 12)).unwrap();
        assert!(labels.iter().all(|&l| l == 0));
    }

    fn fd_check_all_params(hopfield: bool, frozen: bool, seed: u64) {
        let mut model = SegModel::init(tiny_config(hopfield), seed).unwrap();
        if frozen {
            model.hopfield.as_mut().unwrap().freeze();
        }
        let mut disc = Discriminator::init(
            DiscConfig {
                in_channels: 3,
                hidden_channels: vec![4],
                leaky_slope: 0.1,
            },
            seed + 1,
        )
        .unwrap();
        let img_s = random_image(4, 4, seed + 2);
        let img_t = random_image(4, 4, seed + 3);
        let labels: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let lambda = 0.05;

        let (seg_grads, disc_grads, _) =
            full_objective_grads(&model, &disc, &img_s, &labels, &img_t, lambda).unwrap();
        let seg_flat = seg_grads.flat();
        let disc_flat = disc_grads.flat();
        let mask = model.frozen_mask();

        let h = 1e-6;
        let mut params = model.flat_params();
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            model.set_flat_params(&params).unwrap();
            let up = full_objective_value(&model, &disc, &img_s, &labels, &img_t, lambda).unwrap();
            params[i] = orig - h;
            model.set_flat_params(&params).unwrap();
            let dn = full_objective_value(&model, &disc, &img_s, &labels, &img_t, lambda).unwrap();
            params[i] = orig;
            model.set_flat_params(&params).unwrap();
            let numeric = (up - dn) / (2.0 * h);
            if mask[i] {
                assert_eq!(seg_flat[i], 0.0, "frozen param {i} must report zero");
            } else {
                let scale = seg_flat[i].abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (seg_flat[i] - numeric).abs() / scale < 1e-5,
                    "seg param {i}: analytic {} vs numeric {numeric}",
                    seg_flat[i]
                );
            }
        }
        let mut dparams = disc.flat_params();
        for i in 0..dparams.len() {
            let orig = dparams[i];
            dparams[i] = orig + h;
            disc.set_flat_params(&dparams).unwrap();
            let up = full_objective_value(&model, &disc, &img_s, &labels, &img_t, lambda).unwrap();
            dparams[i] = orig - h;
            disc.set_flat_params(&dparams).unwrap();
            let dn = full_objective_value(&model, &disc, &img_s, &labels, &img_t, lambda).unwrap();
            dparams[i] = orig;
            disc.set_flat_params(&dparams).unwrap();
            let numeric = (up - dn) / (2.0 * h);
            let scale = disc_flat[i].abs().max(numeric.abs()).max(1e-3);
            assert!(
                (disc_flat[i] - numeric).abs() / scale < 1e-5,
                "disc param {i}: analytic {} vs numeric {numeric}",
                disc_flat[i]
            );
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        fd_check_all_params(true, false, 40);
    }

    #[test]
    fn objective_gradients_match_without_hopfield() {
        fd_check_all_params(false, false, 50);
    }

    #[test]
    fn frozen_gradients_are_zero_and_others_still_match() {
        fd_check_all_params(true, true, 60);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = SegModel::init(tiny_config(true), 70).unwrap();
        model.hopfield.as_mut().unwrap().freeze();
        model.save(&path, "pretrain").unwrap();
        let back = SegModel::load(&path).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert!(back.hopfield.as_ref().unwrap().frozen);
        let a = model.flat_params();
        let b = back.flat_params();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn discriminator_outputs_two_way_probabilities() {
        let disc = Discriminator::init(
            DiscConfig {
                in_channels: 3,
                hidden_channels: vec![4],
                leaky_slope: 0.1,
            },
            80,
        )
        .unwrap();
        let model = SegModel::init(tiny_config(true), 81).unwrap();
        let probs = model.seg_forward(&random_image(4, 4, 82)).unwrap();
        let (d, _) = disc.forward(&probs).unwrap();
        assert_eq!(d.channels, 2);
        for loc in 0..d.locations() {
            let s = d.data[loc * 2] + d.data[loc * 2 + 1];
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
