//! Shared vision transformer over the three modalities.
//!
//! Each image becomes `N_p` patch tokens (raster order, top-left first) plus
//! a per-modality class token at row 0. All transformer parameters are shared
//! across modalities; every block records its attention probabilities so
//! token selection can roll them out afterwards.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Nir,
    Tir,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Nir, Modality::Tir];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Nir => "nir",
            Modality::Tir => "tir",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub use_camera_embedding: bool,
    pub num_cameras: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            height: 64,
            width: 32,
            channels: 3,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            use_camera_embedding: true,
            num_cameras: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible into {}px patches",
                self.height, self.width, self.patch
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embed dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return Err(Error::config("depth, mlp ratio and channels must be positive"));
        }
        if self.use_camera_embedding && self.num_cameras == 0 {
            return Err(Error::config("camera embedding needs at least one camera"));
        }
        Ok(())
    }

    /// Patch grid as `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Tokens per sequence including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_width(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Flattens an image into `[N_p, C·p·p]`; row `i` is grid cell
/// `(i / cols, i % cols)`, each row laid out channel, then y, then x.
pub fn patchify(img: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || img.height() % patch != 0 || img.width() % patch != 0 {
        return Err(Error::dim(format!(
            "{}x{} image does not tile into {patch}px patches",
            img.height(),
            img.width()
        )));
    }
    let (gr, gc) = (img.height() / patch, img.width() / patch);
    let pw = img.channels() * patch * patch;
    let mut data = Vec::with_capacity(gr * gc * pw);
    for r in 0..gr {
        for c in 0..gc {
            for ch in 0..img.channels() {
                for y in 0..patch {
                    for x in 0..patch {
                        data.push(img.get(ch, r * patch + y, c * patch + x));
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![gr * gc, pw], data))
}

pub(crate) fn trunc_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                break v;
            }
        })
        .collect();
    Tensor::from_raw(shape.to_vec(), data)
}

/// Pre-norm transformer block: `x + MHSA(LN(x))` then `x + FFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub heads: usize,
    pub ln1: (ParamId, ParamId),
    pub qkv: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

/// Result of one block: new tokens and the attention node whose saved
/// probabilities describe this layer.
pub struct BlockOutput {
    pub tokens: Var,
    pub attention: Var,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio;
        let norm = |store: &mut ParamStore, name: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add_no_decay(&format!("{prefix}.{name}.weight"), Tensor::full(&[dim], 1.0))?,
                store.add_no_decay(&format!("{prefix}.{name}.bias"), Tensor::zeros(&[dim]))?,
            ))
        };
        let ln1 = norm(store, "ln1")?;
        let ln2 = norm(store, "ln2")?;
        let mut lin = |store: &mut ParamStore, name: &str, i: usize, o: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(&format!("{prefix}.{name}.weight"), trunc_normal(rng, &[i, o]))?,
                store.add_no_decay(&format!("{prefix}.{name}.bias"), Tensor::zeros(&[o]))?,
            ))
        };
        Ok(TransformerBlock {
            heads,
            ln1,
            qkv: lin(store, "qkv", dim, 3 * dim)?,
            proj: lin(store, "proj", dim, dim)?,
            ln2,
            fc1: lin(store, "fc1", dim, hidden)?,
            fc2: lin(store, "fc2", hidden, dim)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [self.ln1, self.qkv, self.proj, self.ln2, self.fc1, self.fc2]
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .collect()
    }

    /// Runs the block over `groups` stacked sequences. Keys whose
    /// `key_mask` entry is false receive no attention.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        groups: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<BlockOutput> {
        let p = |tape: &mut Tape, (w, b): (ParamId, ParamId)| (tape.param(store, w), tape.param(store, b));
        let (g1, b1) = p(tape, self.ln1);
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let (w, b) = p(tape, self.qkv);
        let qkv = tape.linear(h, w, Some(b))?;
        let attention = tape.attention(qkv, groups, self.heads, key_mask)?;
        let (w, b) = p(tape, self.proj);
        let o = tape.linear(attention, w, Some(b))?;
        let x = tape.add(x, o)?;
        let (g2, b2) = p(tape, self.ln2);
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let (w, b) = p(tape, self.fc1);
        let h = tape.linear(h, w, Some(b))?;
        let h = tape.gelu(h);
        let (w, b) = p(tape, self.fc2);
        let h = tape.linear(h, w, Some(b))?;
        let tokens = tape.add(x, h)?;
        Ok(BlockOutput { tokens, attention })
    }
}

/// Per-layer, per-head attention matrices of one sequence, each
/// `tokens × tokens` and row-stochastic.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    layers: usize,
    heads: usize,
    tokens: usize,
    weights: Vec<f64>,
}

impl AttentionStack {
    /// `weights` laid out `[layer][head][row][col]`.
    pub fn new(layers: usize, heads: usize, tokens: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != layers * heads * tokens * tokens {
            return Err(Error::dim("attention stack size"));
        }
        Ok(AttentionStack {
            layers,
            heads,
            tokens,
            weights,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Row-major `tokens × tokens` matrix for one layer (0-based) and head.
    pub fn matrix(&self, layer: usize, head: usize) -> &[f64] {
        let n = self.tokens * self.tokens;
        &self.weights[(layer * self.heads + head) * n..][..n]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch_embed: (ParamId, ParamId),
    pub cls: [ParamId; 3],
    pub pos: ParamId,
    pub camera: Option<ParamId>,
    pub blocks: Vec<TransformerBlock>,
    pub norm: (ParamId, ParamId),
}

/// One input image for a batched forward pass.
#[derive(Clone, Copy)]
pub struct BackboneInput<'a> {
    pub image: &'a Image,
    pub modality: Modality,
    pub camera: usize,
}

pub struct BackboneOutput {
    /// `[groups * tokens, dim]`, sequences stacked in input order.
    pub tokens: Var,
    /// One attention node per layer.
    pub attention: Vec<Var>,
    pub groups: usize,
}

impl BackboneOutput {
    /// Extracts the attention stack of input sequence `group`.
    pub fn attention_stack(&self, tape: &Tape, group: usize, heads: usize, tokens: usize) -> AttentionStack {
        let per = heads * tokens * tokens;
        let mut w = Vec::with_capacity(self.attention.len() * per);
        for &a in &self.attention {
            let probs = tape.attention_probs(a).expect("attention node");
            w.extend_from_slice(&probs[group * per..(group + 1) * per]);
        }
        AttentionStack::new(self.attention.len(), heads, tokens, w).unwrap()
    }
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let patch_embed = (
            store.add("backbone.patch_embed.weight", trunc_normal(rng, &[cfg.patch_width(), d]))?,
            store.add_no_decay("backbone.patch_embed.bias", Tensor::zeros(&[d]))?,
        );
        let mut cls = Vec::with_capacity(3);
        for m in Modality::ALL {
            cls.push(store.add_no_decay(&format!("backbone.cls.{}", m.tag()), trunc_normal(rng, &[1, d]))?);
        }
        let pos = store.add_no_decay("backbone.pos_embed", trunc_normal(rng, &[cfg.tokens(), d]))?;
        let camera = if cfg.use_camera_embedding {
            Some(store.add_no_decay("backbone.camera_embed", Tensor::zeros(&[cfg.num_cameras, d]))?)
        } else {
            None
        };
        let blocks = (0..cfg.depth)
            .map(|k| TransformerBlock::new(store, &format!("backbone.blocks.{k}"), d, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = (
            store.add_no_decay("backbone.norm.weight", Tensor::full(&[d], 1.0))?,
            store.add_no_decay("backbone.norm.bias", Tensor::zeros(&[d]))?,
        );
        Ok(Backbone {
            cfg,
            patch_embed,
            cls: [cls[0], cls[1], cls[2]],
            pos,
            camera,
            blocks,
            norm,
        })
    }

    /// Batched forward pass; sequence `g` of the output is `inputs[g]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &[BackboneInput]) -> Result<BackboneOutput> {
        let cfg = &self.cfg;
        if inputs.is_empty() {
            return Err(Error::contract("empty backbone batch"));
        }
        let (np, t, pw) = (cfg.num_patches(), cfg.tokens(), cfg.patch_width());
        let groups = inputs.len();
        let mut patches = Vec::with_capacity(groups * np * pw);
        for inp in inputs {
            let img = inp.image;
            if (img.channels(), img.height(), img.width()) != (cfg.channels, cfg.height, cfg.width) {
                return Err(Error::dim(format!(
                    "image {}x{}x{} does not match backbone {}x{}x{}",
                    img.channels(),
                    img.height(),
                    img.width(),
                    cfg.channels,
                    cfg.height,
                    cfg.width
                )));
            }
            if cfg.use_camera_embedding && inp.camera >= cfg.num_cameras {
                return Err(Error::config(format!(
                    "camera id {} outside 0..{}",
                    inp.camera, cfg.num_cameras
                )));
            }
            patches.extend_from_slice(patchify(img, cfg.patch)?.data());
        }
        let patches = tape.constant(Tensor::from_raw(vec![groups * np, pw], patches));
        let (w, b) = (tape.param(store, self.patch_embed.0), tape.param(store, self.patch_embed.1));
        let embedded = tape.linear(patches, w, Some(b))?;

        let cls: Vec<Var> = self.cls.iter().map(|&c| tape.param(store, c)).collect();
        let mut parts = vec![embedded];
        parts.extend(cls);
        let source = tape.concat(&parts, 0)?;
        let mut order = Vec::with_capacity(groups * t);
        for (g, inp) in inputs.iter().enumerate() {
            order.push(groups * np + inp.modality.index());
            order.extend(g * np..(g + 1) * np);
        }
        let x = tape.gather_rows(source, &order)?;
        let pos = tape.param(store, self.pos);
        let mut x = tape.add_broadcast(x, pos)?;
        if let Some(cam) = self.camera {
            let table = tape.param(store, cam);
            let idx: Vec<usize> = inputs.iter().flat_map(|i| std::iter::repeat(i.camera).take(t)).collect();
            let per_token = tape.gather_rows(table, &idx)?;
            x = tape.add(x, per_token)?;
        }

        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(tape, store, x, groups, None)?;
            x = out.tokens;
            attention.push(out.attention);
        }
        let (g, b) = (tape.param(store, self.norm.0), tape.param(store, self.norm.1));
        let tokens = tape.layer_norm(x, g, b, LN_EPS)?;
        Ok(BackboneOutput {
            tokens,
            attention,
            groups,
        })
    }

    /// Single-image convenience: last-layer tokens `[N_p + 1, D]` and the
    /// attention stack.
    pub fn forward_single(
        &self,
        store: &ParamStore,
        image: &Image,
        modality: Modality,
        camera: usize,
    ) -> Result<(Tensor, AttentionStack)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &[BackboneInput { image, modality, camera }])?;
        let stack = out.attention_stack(&tape, 0, self.cfg.heads, self.cfg.tokens());
        Ok((tape.value(out.tokens).clone(), stack))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            height: 16,
            width: 8,
            patch: 4,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            ..Default::default()
        }
    }

    fn noise_image(rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Image {
        let n = cfg.channels * cfg.height * cfg.width;
        Image::new(cfg.channels, cfg.height, cfg.width, (0..n).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn patch_layout_is_raster_order() {
        let p = 2;
        let mut img = Image::filled(1, 2 * p, 2 * p, 0.0);
        for y in 0..2 * p {
            for x in 0..2 * p {
                img.set(0, y, x, ((y / p) * 2 + x / p) as f64);
            }
        }
        let t = patchify(&img, p).unwrap();
        assert_eq!(t.shape(), &[4, p * p]);
        for i in 0..4 {
            assert!(t.row(i).iter().all(|&v| v == i as f64));
        }
        let t = patchify(&Image::filled(3, 8, 8, 0.3), 4).unwrap();
        assert!((1..4).all(|i| t.row(i) == t.row(0)));
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn patch_count_examples() {
        let cfg = BackboneConfig {
            height: 256,
            width: 128,
            patch: 16,
            ..Default::default()
        };
        assert_eq!(cfg.num_patches(), 128);
        assert_eq!(BackboneConfig::default().num_patches(), 32);
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg();
        cfg.heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = small_cfg();
        cfg.width = 10;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shapes_and_stochastic_attention() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let img = noise_image(&mut rng, &cfg);
        let (tokens, stack) = bb.forward_single(&store, &img, Modality::Nir, 1).unwrap();
        assert_eq!(tokens.shape(), &[cfg.tokens(), cfg.dim]);
        assert_eq!((stack.layers(), stack.heads()), (cfg.depth, cfg.heads));
        for k in 0..cfg.depth {
            for h in 0..cfg.heads {
                for row in stack.matrix(k, h).chunks(cfg.tokens()) {
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
        assert!(matches!(
            bb.forward_single(&store, &img, Modality::Rgb, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_copy_of_block_parameters() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let block_params = store.ids().filter(|&id| store.name(id).starts_with("backbone.blocks.")).count();
        assert_eq!(block_params, cfg.depth * 12);
        assert_eq!(bb.cls.len(), 3);
    }

    #[test]
    fn modalities_share_weights_but_not_class_tokens() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let img = noise_image(&mut rng, &cfg);
        let mut tape = Tape::new();
        let inputs = [
            BackboneInput { image: &img, modality: Modality::Rgb, camera: 0 },
            BackboneInput { image: &img, modality: Modality::Tir, camera: 0 },
        ];
        let out = bb.forward(&mut tape, &store, &inputs).unwrap();
        let tokens = tape.value(out.tokens);
        let t = cfg.tokens();
        assert_ne!(tokens.row(0), tokens.row(t));
        // The class tokens feed the only difference between the two passes;
        // gradients through both reach one shared set of block weights.
        let l = tape.sum(out.tokens);
        let g = tape.backward(l, &store).unwrap();
        assert!(g.param(bb.cls[Modality::Rgb.index()]).data().iter().any(|&v| v != 0.0));
        assert!(g.param(bb.cls[Modality::Nir.index()]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_residual_branches_pass_embeddings_through() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg.clone(), &mut store, &mut rng).unwrap();
        for block in &bb.blocks {
            for id in [block.proj.0, block.proj.1, block.fc2.0, block.fc2.1] {
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = Tensor::zeros(&shape);
            }
        }
        let img = noise_image(&mut rng, &cfg);
        let (tokens, _) = bb.forward_single(&store, &img, Modality::Tir, 1).unwrap();
        // Trace by hand: class row = LN(cls_tir + pos[0] + cam[1]) with unit gain, zero bias.
        let d = cfg.dim;
        let resid: Vec<f64> = (0..d)
            .map(|c| {
                store.get(bb.cls[2]).data()[c]
                    + store.get(bb.pos).data()[c]
                    + store.get(bb.camera.unwrap()).data()[d + c]
            })
            .collect();
        let mean = resid.iter().sum::<f64>() / d as f64;
        let var = resid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            let want = (resid[c] - mean) / (var + LN_EPS).sqrt();
            assert!((tokens.get(0, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_permutation_permutes_outputs_without_position_embedding() {
        let cfg = BackboneConfig {
            use_camera_embedding: false,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let bb = Backbone::new(cfg.clone(), &mut store, &mut rng).unwrap();
        *store.get_mut(bb.pos) = Tensor::zeros(&[cfg.tokens(), cfg.dim]);
        let img = noise_image(&mut rng, &cfg);
        // swap patch (0,0) with patch (2,1)
        let p = cfg.patch;
        let mut swapped = img.clone();
        for ch in 0..cfg.channels {
            for y in 0..p {
                for x in 0..p {
                    let a = img.get(ch, y, x);
                    let b = img.get(ch, 2 * p + y, p + x);
                    swapped.set(ch, y, x, b);
                    swapped.set(ch, 2 * p + y, p + x, a);
                }
            }
        }
        let (t1, _) = bb.forward_single(&store, &img, Modality::Rgb, 0).unwrap();
        let (t2, _) = bb.forward_single(&store, &swapped, Modality::Rgb, 0).unwrap();
        let (i, j) = (1, 1 + 2 * 2 + 1);
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff(t1.row(i), t2.row(j)) < 1e-12);
        assert!(diff(t1.row(j), t2.row(i)) < 1e-12);
        assert!(diff(t1.row(0), t2.row(0)) < 1e-12);
    }
}
