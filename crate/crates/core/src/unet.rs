//! The toy denoiser: a three-stage convolutional UNet with timestep and class
//! conditioning and one bottleneck attention layer carrying a learned
//! positional map of fixed trained extent.
//!
//! Every parameter is tagged with the block group it belongs to. Conv and
//! linear weights inside the down/mid/up stages are prunable; biases, norm
//! affines, and all conditioning parameters (timestep MLP, class table,
//! positional map) are excluded.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::prune::PruneMask;
use crate::rng::substream;
use crate::tape::{GradMap, Tape, VarId};
use crate::tensor::{Scalar, Tensor, TensorOf};

pub const NORM_GROUPS: usize = 8;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockTag {
    Down,
    Mid,
    Up,
    Excluded,
}

impl BlockTag {
    pub fn prunable_groups() -> [BlockTag; 3] {
        [BlockTag::Down, BlockTag::Mid, BlockTag::Up]
    }
}

/// Static description of the network; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub width: usize,
    pub train_h: usize,
    pub train_w: usize,
    pub n_classes: usize,
    pub groups: usize,
    pub emb_dim: usize,
    pub pos_h: usize,
    pub pos_w: usize,
}

/// Named parameter tensors in deterministic order, each tagged with a block group.
#[derive(Clone, Debug)]
pub struct ParameterStore {
    arch: ArchDescriptor,
    entries: Vec<(String, Tensor, BlockTag)>,
    index: HashMap<String, usize>,
    pub epochs_done: usize,
}

impl ParameterStore {
    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, BlockTag)> {
        self.entries.iter().map(|(n, t, tag)| (n.as_str(), t, *tag))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn tag(&self, name: &str) -> Option<BlockTag> {
        self.index.get(name).map(|&i| self.entries[i].2)
    }

    /// Names of prunable tensors in the given group, in store order.
    pub fn prunable_names(&self, group: BlockTag) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, _, t)| *t == group && *t != BlockTag::Excluded)
            .map(|(n, _, _)| n.as_str())
            .collect()
    }

    fn insert(&mut self, name: &str, t: Tensor, tag: BlockTag) {
        debug_assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t, tag));
    }

    /// w ← w − lr·g for every parameter with a gradient entry; missing keys
    /// are skipped with a warning.
    pub fn sgd_update(&mut self, grads: &GradMap, lr: f32) -> Result<()> {
        if lr < 0.0 {
            return Err(Error::invalid("learning rate must be non-negative"));
        }
        for (name, tensor, _) in &mut self.entries {
            match grads.get(name.as_str()) {
                Some(g) => {
                    if g.shape() != tensor.shape() {
                        return Err(Error::shape(format!(
                            "gradient for {name}: {:?} vs {:?}",
                            g.shape(),
                            tensor.shape()
                        )));
                    }
                    for (w, &gv) in tensor.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
                None => {
                    log::warn!("no gradient for parameter {name}, skipping update");
                }
            }
        }
        Ok(())
    }

    /// Materializes parameters at precision `S`, applying the mask (w ⊙ m)
    /// to every masked tensor. Stored weights are never touched.
    pub fn resolve<S: Scalar>(&self, mask: Option<&PruneMask>) -> Result<ResolvedModel<S>> {
        if let Some(m) = mask {
            for (name, bits) in m.masks() {
                let Some(w) = self.get(name) else {
                    return Err(Error::invalid(format!(
                        "mask names unknown parameter {name}"
                    )));
                };
                if w.shape() != bits.shape() {
                    return Err(Error::shape(format!(
                        "mask for {name}: {:?} vs parameter {:?}",
                        bits.shape(),
                        w.shape()
                    )));
                }
            }
        }
        let mut tensors = BTreeMap::new();
        for (name, tensor, _) in &self.entries {
            // Kernels may skip exact-zero weights, so a corrupt parameter
            // would not reliably surface downstream; reject it here.
            tensor.ensure_finite(&format!("parameter {name}"))?;
            let masked = match mask.and_then(|m| m.masks().get(name.as_str())) {
                Some(bits) => tensor.mul_elem(bits)?,
                None => tensor.clone(),
            };
            tensors.insert(name.clone(), masked.convert::<S>());
        }
        Ok(ResolvedModel {
            arch: self.arch.clone(),
            tensors,
            forward_count: AtomicU64::new(0),
        })
    }

    /// Single-shot inference forward at working precision.
    pub fn forward(
        &self,
        x: &Tensor,
        t: &[usize],
        c: &[usize],
        mask: Option<&PruneMask>,
    ) -> Result<Tensor> {
        self.resolve::<f32>(mask)?.forward(x, t, c)
    }
}

/// Builds an initialized store. Architecture: two down blocks with 2x average
/// pooling, one mid block plus attention with a learned positional map sized
/// (train_h/4, train_w/4), two up blocks with nearest upsampling and skip
/// connections, and a zero-initialized final 3x3 conv back to one channel.
pub fn build(width: usize, seed: u64, train_h: usize, train_w: usize) -> Result<ParameterStore> {
    if width < 8 || width % NORM_GROUPS != 0 {
        return Err(Error::invalid(format!(
            "width {width} must be >= 8 and divisible by {NORM_GROUPS}"
        )));
    }
    if train_h % 4 != 0 || train_w % 4 != 0 {
        return Err(Error::invalid(format!(
            "train extents {train_h}x{train_w} must be divisible by 4"
        )));
    }
    let c1 = width;
    let c2 = width * 2;
    let emb = width;
    let arch = ArchDescriptor {
        width,
        train_h,
        train_w,
        n_classes: 4,
        groups: NORM_GROUPS,
        emb_dim: emb,
        pos_h: train_h / 4,
        pos_w: train_w / 4,
    };
    let mut store = ParameterStore {
        arch: arch.clone(),
        entries: Vec::new(),
        index: HashMap::new(),
        epochs_done: 0,
    };

    let normal = |name: &str, shape: &[usize], std: f64| -> Tensor {
        let mut rng = substream(seed, name, 0);
        Tensor::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            (z * std) as f32
        })
    };
    let kaiming = |name: &str, shape: &[usize]| -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        normal(name, shape, (2.0 / fan_in as f64).sqrt())
    };

    // Conditioning pathway (all excluded from pruning).
    store.insert("time.mlp1.w", kaiming("time.mlp1.w", &[emb, emb]), BlockTag::Excluded);
    store.insert("time.mlp1.b", Tensor::zeros(&[emb]), BlockTag::Excluded);
    store.insert("time.mlp2.w", kaiming("time.mlp2.w", &[emb, emb]), BlockTag::Excluded);
    store.insert("time.mlp2.b", Tensor::zeros(&[emb]), BlockTag::Excluded);
    store.insert(
        "class.table",
        normal("class.table", &[arch.n_classes, emb], 0.5),
        BlockTag::Excluded,
    );

    store.insert("stem.w", kaiming("stem.w", &[c1, 1, 3, 3]), BlockTag::Down);
    store.insert("stem.b", Tensor::zeros(&[c1]), BlockTag::Excluded);

    let resblock = |store: &mut ParameterStore, prefix: &str, cin: usize, cout: usize, tag: BlockTag| {
        store.insert(&format!("{prefix}.gn1.g"), Tensor::filled(&[cin], 1.0), BlockTag::Excluded);
        store.insert(&format!("{prefix}.gn1.b"), Tensor::zeros(&[cin]), BlockTag::Excluded);
        store.insert(
            &format!("{prefix}.conv1.w"),
            kaiming(&format!("{prefix}.conv1.w"), &[cout, cin, 3, 3]),
            tag,
        );
        store.insert(&format!("{prefix}.conv1.b"), Tensor::zeros(&[cout]), BlockTag::Excluded);
        store.insert(
            &format!("{prefix}.cond.w"),
            kaiming(&format!("{prefix}.cond.w"), &[cout, emb]),
            BlockTag::Excluded,
        );
        store.insert(&format!("{prefix}.cond.b"), Tensor::zeros(&[cout]), BlockTag::Excluded);
        store.insert(&format!("{prefix}.gn2.g"), Tensor::filled(&[cout], 1.0), BlockTag::Excluded);
        store.insert(&format!("{prefix}.gn2.b"), Tensor::zeros(&[cout]), BlockTag::Excluded);
        store.insert(
            &format!("{prefix}.conv2.w"),
            kaiming(&format!("{prefix}.conv2.w"), &[cout, cout, 3, 3]),
            tag,
        );
        store.insert(&format!("{prefix}.conv2.b"), Tensor::zeros(&[cout]), BlockTag::Excluded);
        if cin != cout {
            store.insert(
                &format!("{prefix}.skip.w"),
                kaiming(&format!("{prefix}.skip.w"), &[cout, cin, 1, 1]),
                tag,
            );
            store.insert(&format!("{prefix}.skip.b"), Tensor::zeros(&[cout]), BlockTag::Excluded);
        }
    };

    resblock(&mut store, "down1", c1, c1, BlockTag::Down);
    resblock(&mut store, "down2", c1, c2, BlockTag::Down);
    resblock(&mut store, "mid", c2, c2, BlockTag::Mid);
    for p in ["wq", "wk", "wv", "wo"] {
        let name = format!("mid.attn.{p}");
        store.insert(&name, kaiming(&name, &[c2, c2]), BlockTag::Mid);
    }
    store.insert(
        "mid.attn.pos",
        normal("mid.attn.pos", &[c2, arch.pos_h, arch.pos_w], 0.1),
        BlockTag::Excluded,
    );
    resblock(&mut store, "up1", c2 * 2, c1, BlockTag::Up);
    resblock(&mut store, "up2", c1 * 2, c1, BlockTag::Up);

    store.insert("final.gn.g", Tensor::filled(&[c1], 1.0), BlockTag::Excluded);
    store.insert("final.gn.b", Tensor::zeros(&[c1]), BlockTag::Excluded);
    store.insert("final.w", Tensor::zeros(&[1, c1, 3, 3]), BlockTag::Up);
    store.insert("final.b", Tensor::zeros(&[1]), BlockTag::Excluded);

    for tag in BlockTag::prunable_groups() {
        debug_assert!(!store.prunable_names(tag).is_empty());
    }
    Ok(store)
}

/// Single-head scaled dot-product attention over the H·W token grid of
/// (input + resized positional map), projected by `wo` and residual-added
/// to the input.
pub fn attention2d<S: Scalar>(
    x: &TensorOf<S>,
    wq: &TensorOf<S>,
    wk: &TensorOf<S>,
    wv: &TensorOf<S>,
    wo: &TensorOf<S>,
    pos: &TensorOf<S>,
) -> Result<TensorOf<S>> {
    let (n, c, h, w) = x.dims4()?;
    for (name, m) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
        if m.shape() != [c, c] {
            return Err(Error::shape(format!(
                "attention projection {name} must be [{c},{c}], got {:?}",
                m.shape()
            )));
        }
    }
    let tokens = h * w;
    let zero_bias = TensorOf::<S>::zeros(&[c]);
    let inv_sqrt_c = (1.0 / (c as f64).sqrt()) as f32;

    let pos_r = ops::bilinear_resize_chw(pos, h, w)?;
    let hp = ops::add_chw(x, &pos_r)?;
    let tok = ops::to_tokens(&hp)?;
    let flat = tok.reshaped(&[n * tokens, c])?;
    let q = ops::linear_forward(&flat, wq, &zero_bias)?.reshaped(&[n, tokens, c])?;
    let k = ops::linear_forward(&flat, wk, &zero_bias)?.reshaped(&[n, tokens, c])?;
    let v = ops::linear_forward(&flat, wv, &zero_bias)?.reshaped(&[n, tokens, c])?;
    let scores = ops::bmm_nt_forward(&q, &k)?.scale(S::of_f64(f64::from(inv_sqrt_c)));
    let weights = ops::softmax_last_forward(&scores)?;
    let av = ops::bmm_forward(&weights, &v)?.reshaped(&[n * tokens, c])?;
    let o = ops::linear_forward(&av, wo, &zero_bias)?.reshaped(&[n, tokens, c])?;
    let spatial = ops::from_tokens(&o, h, w)?;
    x.add(&spatial)
}

/// Parameters materialized at a fixed precision with any mask already applied.
/// Read-shared across threads; counts its forward invocations.
pub struct ResolvedModel<S: Scalar> {
    arch: ArchDescriptor,
    tensors: BTreeMap<String, TensorOf<S>>,
    forward_count: AtomicU64,
}

impl<S: Scalar> ResolvedModel<S> {
    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorOf<S>> {
        self.tensors.get(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut TensorOf<S>> {
        self.tensors.get_mut(name)
    }

    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forward_count.store(0, Ordering::Relaxed);
    }

    fn p(&self, name: &str) -> Result<&TensorOf<S>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    fn resblock(
        &self,
        prefix: &str,
        x: &TensorOf<S>,
        cond: &TensorOf<S>,
        skip_proj: bool,
    ) -> Result<TensorOf<S>> {
        let (h, _) = ops::group_norm_forward(
            x,
            self.arch.groups,
            self.p(&format!("{prefix}.gn1.g"))?,
            self.p(&format!("{prefix}.gn1.b"))?,
            NORM_EPS,
        )?;
        let h = ops::silu_forward(&h);
        let h = ops::conv2d_forward(
            &h,
            self.p(&format!("{prefix}.conv1.w"))?,
            self.p(&format!("{prefix}.conv1.b"))?,
            1,
            1,
        )?;
        let cb = ops::linear_forward(
            cond,
            self.p(&format!("{prefix}.cond.w"))?,
            self.p(&format!("{prefix}.cond.b"))?,
        )?;
        let h = ops::add_nc(&h, &cb)?;
        let (h, _) = ops::group_norm_forward(
            &h,
            self.arch.groups,
            self.p(&format!("{prefix}.gn2.g"))?,
            self.p(&format!("{prefix}.gn2.b"))?,
            NORM_EPS,
        )?;
        let h = ops::silu_forward(&h);
        let h = ops::conv2d_forward(
            &h,
            self.p(&format!("{prefix}.conv2.w"))?,
            self.p(&format!("{prefix}.conv2.b"))?,
            1,
            1,
        )?;
        let s = if skip_proj {
            ops::conv2d_forward(
                x,
                self.p(&format!("{prefix}.skip.w"))?,
                self.p(&format!("{prefix}.skip.b"))?,
                1,
                0,
            )?
        } else {
            x.clone()
        };
        h.add(&s)
    }

    /// Predicts noise for x [N,1,H,W] with per-sample timesteps and classes.
    pub fn forward(&self, x: &TensorOf<S>, t: &[usize], c: &[usize]) -> Result<TensorOf<S>> {
        let (n, cx, h, w) = x.dims4()?;
        validate_forward_args(n, cx, h, w, t, c)?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);

        // Conditioning vector: timestep MLP plus class embedding.
        let sf = ops::sinusoidal_features::<S>(t, self.arch.emb_dim)?;
        let h1 = ops::linear_forward(&sf, self.p("time.mlp1.w")?, self.p("time.mlp1.b")?)?;
        let h1 = ops::silu_forward(&h1);
        let temb = ops::linear_forward(&h1, self.p("time.mlp2.w")?, self.p("time.mlp2.b")?)?;
        let cemb = ops::embed_rows(self.p("class.table")?, c)?;
        let cond = temb.add(&cemb)?;

        let x0 = ops::conv2d_forward(x, self.p("stem.w")?, self.p("stem.b")?, 1, 1)?;
        let s1 = self.resblock("down1", &x0, &cond, false)?;
        let p1 = ops::avg_pool2_forward(&s1)?;
        let s2 = self.resblock("down2", &p1, &cond, true)?;
        let p2 = ops::avg_pool2_forward(&s2)?;

        let m = self.resblock("mid", &p2, &cond, false)?;
        let m = attention2d(
            &m,
            self.p("mid.attn.wq")?,
            self.p("mid.attn.wk")?,
            self.p("mid.attn.wv")?,
            self.p("mid.attn.wo")?,
            self.p("mid.attn.pos")?,
        )?;

        let u = ops::upsample2_forward(&m)?;
        let u = ops::concat_channels(&u, &s2)?;
        let u = self.resblock("up1", &u, &cond, true)?;
        let u = ops::upsample2_forward(&u)?;
        let u = ops::concat_channels(&u, &s1)?;
        let u = self.resblock("up2", &u, &cond, true)?;

        let (f, _) = ops::group_norm_forward(
            &u,
            self.arch.groups,
            self.p("final.gn.g")?,
            self.p("final.gn.b")?,
            NORM_EPS,
        )?;
        let f = ops::silu_forward(&f);
        let out = ops::conv2d_forward(&f, self.p("final.w")?, self.p("final.b")?, 1, 1)?;
        out.ensure_finite("unet forward output")?;
        Ok(out)
    }
}

fn validate_forward_args(
    n: usize,
    cx: usize,
    h: usize,
    w: usize,
    t: &[usize],
    c: &[usize],
) -> Result<()> {
    if cx != 1 {
        return Err(Error::shape(format!("expected 1 input channel, got {cx}")));
    }
    if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
        return Err(Error::invalid(format!(
            "extents {h}x{w} must be >= 8 and divisible by 4"
        )));
    }
    if t.len() != n || c.len() != n {
        return Err(Error::shape(format!(
            "batch {n} vs {} timesteps / {} classes",
            t.len(),
            c.len()
        )));
    }
    if t.iter().any(|&tv| tv == 0) {
        return Err(Error::invalid("timesteps are 1-based"));
    }
    Ok(())
}

/// Records the forward pass on a tape for training. Parameters enter as named
/// leaves; with a mask present, masked weights are multiplied by the constant
/// mask tensor so stored weights stay untouched and gradients flow to w ⊙ m.
pub fn forward_taped(
    tape: &mut Tape,
    store: &ParameterStore,
    x: &Tensor,
    t: &[usize],
    c: &[usize],
    mask: Option<&PruneMask>,
) -> Result<VarId> {
    let (n, cx, h, w) = x.dims4()?;
    validate_forward_args(n, cx, h, w, t, c)?;
    let arch = store.arch().clone();

    let mut leaves: BTreeMap<String, VarId> = BTreeMap::new();
    for (name, tensor, _) in store.iter().map(|(n, t, g)| (n.to_string(), t.clone(), g)) {
        let id = tape.leaf(tensor, Some(&name))?;
        let id = match mask.and_then(|m| m.masks().get(name.as_str())) {
            Some(bits) => tape.mul_const(id, bits.clone())?,
            None => id,
        };
        leaves.insert(name, id);
    }
    let p = |name: &str| -> Result<VarId> {
        leaves
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    };

    let sf = ops::sinusoidal_features::<f32>(t, arch.emb_dim)?;
    let sfid = tape.leaf(sf, None)?;
    let h1 = tape.linear(sfid, p("time.mlp1.w")?, p("time.mlp1.b")?)?;
    let h1 = tape.silu(h1)?;
    let temb = tape.linear(h1, p("time.mlp2.w")?, p("time.mlp2.b")?)?;
    let cemb = tape.embed(p("class.table")?, c)?;
    let cond = tape.add(temb, cemb)?;

    let xid = tape.leaf(x.clone(), None)?;

    let resblock = |tape: &mut Tape, prefix: &str, x: VarId, skip_proj: bool| -> Result<VarId> {
        let h = tape.group_norm(
            x,
            p(&format!("{prefix}.gn1.g"))?,
            p(&format!("{prefix}.gn1.b"))?,
            arch.groups,
            NORM_EPS,
        )?;
        let h = tape.silu(h)?;
        let h = tape.conv2d(
            h,
            p(&format!("{prefix}.conv1.w"))?,
            p(&format!("{prefix}.conv1.b"))?,
            1,
            1,
        )?;
        let cb = tape.linear(
            cond,
            p(&format!("{prefix}.cond.w"))?,
            p(&format!("{prefix}.cond.b"))?,
        )?;
        let h = tape.add_nc(h, cb)?;
        let h = tape.group_norm(
            h,
            p(&format!("{prefix}.gn2.g"))?,
            p(&format!("{prefix}.gn2.b"))?,
            arch.groups,
            NORM_EPS,
        )?;
        let h = tape.silu(h)?;
        let h = tape.conv2d(
            h,
            p(&format!("{prefix}.conv2.w"))?,
            p(&format!("{prefix}.conv2.b"))?,
            1,
            1,
        )?;
        let s = if skip_proj {
            tape.conv2d(
                x,
                p(&format!("{prefix}.skip.w"))?,
                p(&format!("{prefix}.skip.b"))?,
                1,
                0,
            )?
        } else {
            x
        };
        tape.add(h, s)
    };

    let x0 = tape.conv2d(xid, p("stem.w")?, p("stem.b")?, 1, 1)?;
    let s1 = resblock(tape, "down1", x0, false)?;
    let p1 = tape.avg_pool2(s1)?;
    let s2 = resblock(tape, "down2", p1, true)?;
    let p2 = tape.avg_pool2(s2)?;

    let m = resblock(tape, "mid", p2, false)?;
    // Attention over the bottleneck token grid.
    let m = {
        let (_, cm, hm, wm) = tape.value(m).dims4()?;
        let tokens = hm * wm;
        let inv_sqrt_c = (1.0 / (cm as f64).sqrt()) as f32;
        let pos_r = tape.resize_chw(p("mid.attn.pos")?, hm, wm)?;
        let hp = tape.add_chw(m, pos_r)?;
        let tok = tape.to_tokens(hp)?;
        let flat = tape.reshape(tok, &[n * tokens, cm])?;
        let q = tape.matmul_nt(flat, p("mid.attn.wq")?)?;
        let q = tape.reshape(q, &[n, tokens, cm])?;
        let k = tape.matmul_nt(flat, p("mid.attn.wk")?)?;
        let k = tape.reshape(k, &[n, tokens, cm])?;
        let v = tape.matmul_nt(flat, p("mid.attn.wv")?)?;
        let v = tape.reshape(v, &[n, tokens, cm])?;
        let scores = tape.bmm_nt(q, k)?;
        let scores = tape.scale(scores, inv_sqrt_c)?;
        let weights = tape.softmax_last(scores)?;
        let av = tape.bmm(weights, v)?;
        let av = tape.reshape(av, &[n * tokens, cm])?;
        let o = tape.matmul_nt(av, p("mid.attn.wo")?)?;
        let o = tape.reshape(o, &[n, tokens, cm])?;
        let spatial = tape.from_tokens(o, hm, wm)?;
        tape.add(m, spatial)?
    };

    let u = tape.upsample2(m)?;
    let u = tape.concat_channels(u, s2)?;
    let u = resblock(tape, "up1", u, true)?;
    let u = tape.upsample2(u)?;
    let u = tape.concat_channels(u, s1)?;
    let u = resblock(tape, "up2", u, true)?;

    let f = tape.group_norm(u, p("final.gn.g")?, p("final.gn.b")?, arch.groups, NORM_EPS)?;
    let f = tape.silu(f)?;
    tape.conv2d(f, p("final.w")?, p("final.b")?, 1, 1)
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    tag: BlockTag,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchDescriptor,
    epochs_done: usize,
    tensors: Vec<TensorMeta>,
}

/// Serializes the store: one JSON header line, then a contiguous
/// little-endian f32 payload in header order. Round-trips bit-exactly.
pub fn checkpoint_to_bytes(store: &ParameterStore) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        arch: store.arch.clone(),
        epochs_done: store.epochs_done,
        tensors: store
            .entries
            .iter()
            .map(|(n, t, tag)| TensorMeta {
                name: n.clone(),
                shape: t.shape().to_vec(),
                tag: *tag,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t, _) in &store.entries {
        out.extend_from_slice(&t.to_le_bytes());
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ParameterStore> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::CorruptArtifact("checkpoint missing header line".to_string()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
    let mut offset = nl + 1;
    let mut store = ParameterStore {
        arch: header.arch,
        entries: Vec::new(),
        index: HashMap::new(),
        epochs_done: header.epochs_done,
    };
    for meta in header.tensors {
        let numel: usize = meta.shape.iter().product();
        let nbytes = numel * 4;
        if offset + nbytes > bytes.len() {
            return Err(Error::CorruptArtifact(format!(
                "checkpoint payload truncated at {}",
                meta.name
            )));
        }
        let t = Tensor::from_le_bytes(meta.shape, &bytes[offset..offset + nbytes])?;
        offset += nbytes;
        store.insert(&meta.name, t, meta.tag);
    }
    if offset != bytes.len() {
        return Err(Error::CorruptArtifact(
            "checkpoint has trailing bytes".into(),
        ));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParameterStore, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_to_bytes(store)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParameterStore> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    checkpoint_from_bytes(&bytes)
}
