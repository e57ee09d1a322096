//! Discriminator, gate heads and the object-aware reconstruction transformer.
//!
//! The discriminator is a small strided CNN. Each of its block outputs is a
//! tap; a zero-initialised projection of the pooled tap followed by
//! `1 + tanh(·)` gives the gate for one attention layer of the reconstructor,
//! so every gate is exactly one at initialisation. The reconstructor maps
//! frozen patch features through encoder blocks into the latent (its residual
//! stream at the bottleneck) and decoder blocks back to feature space.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tape::{ConvGeometry, Real, Tape, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Frozen random patch embedding of the image.
    Features,
    /// Raw patch pixels.
    Pixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub feat_dim: usize,
    pub target: Target,
    /// Width of the reconstructor and of the latent (`C_lat`).
    pub latent_channels: usize,
    pub ffn_hidden: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub n_max: usize,
    pub disc_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            feat_dim: 128,
            target: Target::Features,
            latent_channels: 64,
            ffn_hidden: 128,
            enc_blocks: 2,
            dec_blocks: 2,
            n_max: 16,
            disc_channels: vec![16, 32, 32, 32],
        }
    }
}

impl ModelConfig {
    pub fn gated_layers(&self) -> usize {
        self.enc_blocks + self.dec_blocks
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Width of the reconstruction target per token.
    pub fn target_dim(&self) -> usize {
        match self.target {
            Target::Features => self.feat_dim,
            Target::Pixels => self.patch_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0
            || !self.image_size.is_multiple_of(self.patch)
            || self.image_size < self.patch
        {
            return Err(Error::config(
                "model.patch",
                "patch size must divide the image size",
            ));
        }
        if self.latent_channels == 0 {
            return Err(Error::config(
                "model.latent_channels",
                "attention width must be positive",
            ));
        }
        if self.disc_channels.is_empty() {
            return Err(Error::config(
                "model.disc_channels",
                "need at least one discriminator block",
            ));
        }
        if self.gated_layers() == 0 {
            return Err(Error::config(
                "model.enc_blocks",
                "need at least one attention block",
            ));
        }
        if self.n_max == 0 {
            return Err(Error::config("model.n_max", "need at least one class"));
        }
        Ok(())
    }

    fn disc_stride(&self, block: usize) -> usize {
        if block + 1 < self.disc_channels.len() {
            2
        } else {
            1
        }
    }

    /// Discriminator tap feeding gated layer `t`.
    pub fn tap_for_layer(&self, t: usize) -> usize {
        t % self.disc_channels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f32>,
    /// Receives channel-projected updates (leading dimension is a latent channel
    /// and the tensor sits on the decoder path).
    pub projectable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn id(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f32>> {
        self.id(name).map(|i| &self.entries[i].value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<Array2<f32>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }
}

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    latent: usize,
}

impl Init<'_> {
    fn add(&mut self, name: String, value: Array2<f32>) {
        let projectable = (name.starts_with("dec") || name.starts_with("rec.out"))
            && value.nrows() == self.latent
            && value.ncols() > 1;
        self.store.entries.push(ParamEntry {
            name,
            value,
            projectable,
        });
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f32) {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        let value = Array2::from_shape_fn((rows, cols), |_| dist.sample(&mut *self.rng));
        self.add(name, value);
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) {
        self.add(name, Array2::zeros((rows, cols)));
    }

    fn ones(&mut self, name: String, cols: usize) {
        self.add(name, Array2::ones((1, cols)));
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f32) {
        self.normal(
            format!("{prefix}.w"),
            fan_in,
            fan_out,
            gain / (fan_in as f32).sqrt(),
        );
        self.zeros(format!("{prefix}.b"), 1, fan_out);
    }
}

/// Gate features for every gated attention layer: each entry is `1 x d`,
/// broadcast over the tokens of that layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GateFeatures {
    pub per_layer: Vec<Array2<f32>>,
}

impl GateFeatures {
    pub fn identity(layers: usize, width: usize) -> Self {
        Self {
            per_layer: vec![Array2::ones((1, width)); layers],
        }
    }

    pub fn layer_count(&self) -> usize {
        self.per_layer.len()
    }
}

/// Output of [`ModelState::reconstruct`]. Token matrices are `L x F` with
/// row `gy * grid + gx`.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub x_hat: Array2<f32>,
    pub target: Array2<f32>,
    /// `L x C_lat`
    pub latent: Array2<f32>,
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    pub gates: Vec<Var>,
    pub x_hat: Var,
    pub latent: Var,
    pub aggregate: Var,
    pub target: Array2<f32>,
}

#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Frozen patch embedding (`patch_len x feat_dim`), regenerated from `embed_seed`.
    pub embed: Array2<f32>,
    pub embed_seed: u64,
}

pub fn frozen_embedding(cfg: &ModelConfig, embed_seed: u64) -> Array2<f32> {
    let mut rng = seed::rng(embed_seed);
    let p = cfg.patch_len();
    let dist = Normal::new(0.0f32, 2.0 / (p as f32).sqrt()).expect("positive std");
    Array2::from_shape_fn((p, cfg.feat_dim), |_| dist.sample(&mut rng))
}

impl ModelState {
    pub fn new(config: ModelConfig, init_seed: u64, embed_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(init_seed);
        let d = config.latent_channels;
        let mut init = Init {
            store: ParamStore::default(),
            rng: &mut rng,
            latent: d,
        };

        let mut cin = 3;
        for (i, &cout) in config.disc_channels.iter().enumerate() {
            init.normal(
                format!("disc.conv{i}.w"),
                9 * cin,
                cout,
                (2.0 / (9 * cin) as f32).sqrt(),
            );
            init.zeros(format!("disc.conv{i}.b"), 1, cout);
            cin = cout;
        }
        init.linear("disc.head", cin, config.n_max, 1.0);
        for t in 0..config.gated_layers() {
            let c_tap = config.disc_channels[config.tap_for_layer(t)];
            init.zeros(format!("gate{t}.w"), c_tap, d);
            init.zeros(format!("gate{t}.b"), 1, d);
        }

        init.linear("rec.in", config.target_dim(), d, 1.0);
        init.normal("rec.pos".into(), config.tokens(), d, 0.02);
        let blocks = (0..config.enc_blocks)
            .map(|i| format!("enc{i}"))
            .chain((0..config.dec_blocks).map(|i| format!("dec{i}")));
        for prefix in blocks {
            init.ones(format!("{prefix}.ln1.g"), d);
            init.zeros(format!("{prefix}.ln1.b"), 1, d);
            for proj in ["q", "k", "v", "o"] {
                init.linear(&format!("{prefix}.{proj}"), d, d, 1.0);
            }
            init.ones(format!("{prefix}.ln2.g"), d);
            init.zeros(format!("{prefix}.ln2.b"), 1, d);
            init.linear(&format!("{prefix}.ffn1"), d, config.ffn_hidden, 2f32.sqrt());
            init.linear(&format!("{prefix}.ffn2"), config.ffn_hidden, d, 0.5);
        }
        init.ones("rec.lnf.g".into(), d);
        init.zeros("rec.lnf.b".into(), 1, d);
        init.linear("rec.out", d, config.target_dim(), 1.0);

        let params = init.store;
        let embed = frozen_embedding(&config, embed_seed);
        Ok(Self {
            config,
            params,
            embed,
            embed_seed,
        })
    }

    pub fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    pub fn gated_layers(&self) -> usize {
        self.config.gated_layers()
    }

    fn check_image(&self, image: &Array3<f32>) -> Result<()> {
        let s = self.config.image_size;
        if image.dim() != (3, s, s) {
            return Err(Error::Contract(format!(
                "image shape {:?} does not match run resolution (3, {s}, {s})",
                image.dim()
            )));
        }
        Ok(())
    }

    /// Patch tokens `L x patch_len`, channel-major within a patch.
    pub fn patches(&self, image: &Array3<f32>) -> Array2<f32> {
        let (p, g) = (self.config.patch, self.config.grid());
        Array2::from_shape_fn((g * g, 3 * p * p), |(tok, k)| {
            let (gy, gx) = (tok / g, tok % g);
            let (c, rem) = (k / (p * p), k % (p * p));
            image[[c, gy * p + rem / p, gx * p + rem % p]]
        })
    }

    /// Reconstruction target tokens `L x F`.
    pub fn target_tokens(&self, image: &Array3<f32>) -> Array2<f32> {
        let patches = self.patches(image);
        match self.config.target {
            Target::Pixels => patches,
            Target::Features => patches.mapv(|v| v - 0.5).dot(&self.embed),
        }
    }

    fn param_vars(&self, tape: &mut Tape<f32>) -> Vec<Var> {
        self.params
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| tape.param(i, e.value.clone()))
            .collect()
    }

    /// Discriminator on the tape: `(logits 1 x n_max, pooled taps)`.
    fn disc_forward(
        &self,
        tape: &mut Tape<f32>,
        pv: &[Var],
        image: &Array3<f32>,
    ) -> (Var, Vec<Var>) {
        let s = self.config.image_size;
        let x = Array2::from_shape_fn((s * s, 3), |(r, c)| image[[c, r / s, r % s]] - 0.5);
        let mut h = tape.constant(x);
        let (mut hh, mut ww, mut cin) = (s, s, 3);
        let mut pooled = Vec::new();
        for (i, &cout) in self.config.disc_channels.iter().enumerate() {
            let geo = ConvGeometry {
                in_h: hh,
                in_w: ww,
                channels: cin,
                kernel: 3,
                stride: self.config.disc_stride(i),
                pad: 1,
            };
            let col = tape.im2col(h, geo);
            let w = pv[self.pid(&format!("disc.conv{i}.w"))];
            let b = pv[self.pid(&format!("disc.conv{i}.b"))];
            let lin = tape.linear(col, w, b);
            h = tape.relu(lin);
            pooled.push(tape.mean_rows(h));
            hh = geo.out_h();
            ww = geo.out_w();
            cin = cout;
        }
        let last = *pooled.last().expect("at least one block");
        let logits = tape.linear(
            last,
            pv[self.pid("disc.head.w")],
            pv[self.pid("disc.head.b")],
        );
        (logits, pooled)
    }

    fn gate_forward(&self, tape: &mut Tape<f32>, pv: &[Var], pooled: &[Var]) -> Vec<Var> {
        (0..self.gated_layers())
            .map(|t| {
                let tap = pooled[self.config.tap_for_layer(t)];
                let w = pv[self.pid(&format!("gate{t}.w"))];
                let b = pv[self.pid(&format!("gate{t}.b"))];
                let h = tape.linear(tap, w, b);
                let th = tape.tanh(h);
                tape.add_const(th, 1.0)
            })
            .collect()
    }

    fn affine_ln(&self, tape: &mut Tape<f32>, pv: &[Var], x: Var, prefix: &str) -> Var {
        let n = tape.layer_norm(x, LN_EPS as f32);
        let g = tape.mul(n, pv[self.pid(&format!("{prefix}.g"))]);
        tape.add(g, pv[self.pid(&format!("{prefix}.b"))])
    }

    fn block(&self, tape: &mut Tape<f32>, pv: &[Var], h: Var, gate: Var, prefix: &str) -> Var {
        let p = |name: &str| pv[self.pid(&format!("{prefix}.{name}"))];
        let a = self.affine_ln(tape, pv, h, &format!("{prefix}.ln1"));
        let q = tape.linear(a, p("q.w"), p("q.b"));
        let k = tape.linear(a, p("k.w"), p("k.b"));
        let v = tape.linear(a, p("v.w"), p("v.b"));
        let att = oasa_on_tape(tape, gate, q, k, v);
        let o = tape.linear(att, p("o.w"), p("o.b"));
        let h = tape.add(h, o);
        let f = self.affine_ln(tape, pv, h, &format!("{prefix}.ln2"));
        let f = tape.linear(f, p("ffn1.w"), p("ffn1.b"));
        let f = tape.relu(f);
        let f = tape.linear(f, p("ffn2.w"), p("ffn2.b"));
        tape.add(h, f)
    }

    fn pid(&self, name: &str) -> usize {
        self.params
            .id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
    }

    fn rec_forward(
        &self,
        tape: &mut Tape<f32>,
        pv: &[Var],
        input: Array2<f32>,
        gates: &[Var],
    ) -> (Var, Var) {
        let x = tape.constant(input);
        let h = tape.linear(x, pv[self.pid("rec.in.w")], pv[self.pid("rec.in.b")]);
        let mut h = tape.add(h, pv[self.pid("rec.pos")]);
        let mut layer = 0;
        for i in 0..self.config.enc_blocks {
            h = self.block(tape, pv, h, gates[layer], &format!("enc{i}"));
            layer += 1;
        }
        let latent = h;
        for i in 0..self.config.dec_blocks {
            h = self.block(tape, pv, h, gates[layer], &format!("dec{i}"));
            layer += 1;
        }
        let f = self.affine_ln(tape, pv, h, "rec.lnf");
        let x_hat = tape.linear(f, pv[self.pid("rec.out.w")], pv[self.pid("rec.out.b")]);
        (x_hat, latent)
    }

    /// Full joint forward pass on `tape`. `noise`, when given, is added to the
    /// reconstructor input (not to the target). With `gated = false` every gate
    /// is the constant one.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        image: &Array3<f32>,
        noise: Option<&Array2<f32>>,
        gated: bool,
    ) -> ForwardVars {
        let pv = self.param_vars(tape);
        let (logits, pooled) = self.disc_forward(tape, &pv, image);
        let gates = if gated {
            self.gate_forward(tape, &pv, &pooled)
        } else {
            (0..self.gated_layers())
                .map(|_| tape.constant(Array2::ones((1, self.latent_channels()))))
                .collect()
        };
        let target = self.target_tokens(image);
        let input = match noise {
            Some(n) => &target + n,
            None => target.clone(),
        };
        let (x_hat, latent) = self.rec_forward(tape, &pv, input, &gates);
        let aggregate = tape.mean_rows(latent);
        ForwardVars {
            logits,
            gates,
            x_hat,
            latent,
            aggregate,
            target,
        }
    }

    /// Class logits (length `n_max`) and per-layer gates for one image.
    pub fn discriminate(&self, image: &Array3<f32>) -> Result<(Vec<f32>, GateFeatures)> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let pv = self.param_vars(&mut tape);
        let (logits, pooled) = self.disc_forward(&mut tape, &pv, image);
        let gates = self.gate_forward(&mut tape, &pv, &pooled);
        Ok((
            tape.value(logits).iter().copied().collect(),
            GateFeatures {
                per_layer: gates.iter().map(|&g| tape.value(g).clone()).collect(),
            },
        ))
    }

    pub fn reconstruct(&self, image: &Array3<f32>, gates: &GateFeatures) -> Result<Reconstruction> {
        self.check_image(image)?;
        if gates.layer_count() != self.gated_layers() {
            return Err(Error::Contract(format!(
                "{} gate layers supplied, reconstructor has {}",
                gates.layer_count(),
                self.gated_layers()
            )));
        }
        let d = self.latent_channels();
        if gates
            .per_layer
            .iter()
            .any(|g| g.ncols() != d || (g.nrows() != 1 && g.nrows() != self.config.tokens()))
        {
            return Err(Error::Contract(
                "gate is not broadcastable to the query shape".into(),
            ));
        }
        let mut tape = Tape::new();
        let pv = self.param_vars(&mut tape);
        let gate_vars: Vec<Var> = gates
            .per_layer
            .iter()
            .map(|g| tape.constant(g.clone()))
            .collect();
        let target = self.target_tokens(image);
        let (x_hat, latent) = self.rec_forward(&mut tape, &pv, target.clone(), &gate_vars);
        Ok(Reconstruction {
            x_hat: tape.value(x_hat).clone(),
            target,
            latent: tape.value(latent).clone(),
        })
    }

    /// Inference path: gates from the image itself (or identity when `gated` is off).
    pub fn infer(&self, image: &Array3<f32>, gated: bool) -> Result<Reconstruction> {
        let gates = if gated {
            self.discriminate(image)?.1
        } else {
            GateFeatures::identity(self.gated_layers(), self.latent_channels())
        };
        self.reconstruct(image, &gates)
    }

    /// Tokens `L x F` to a channel-first grid `F x G x G`.
    pub fn tokens_to_grid(&self, tokens: &Array2<f32>) -> Array3<f32> {
        let g = self.config.grid();
        Array3::from_shape_fn((tokens.ncols(), g, g), |(c, y, x)| tokens[[y * g + x, c]])
    }
}

/// Gated attention on the tape: `softmax(((gate ⊙ q) kᵀ) / √d) v`.
pub fn oasa_on_tape<T: Real>(tape: &mut Tape<T>, gate: Var, q: Var, k: Var, v: Var) -> Var {
    let d = tape.value(q).ncols();
    let gq = tape.mul(q, gate);
    let scores = tape.matmul_nt(gq, k);
    let scaled = tape.scale(scores, T::c(1.0 / (d as f64).sqrt()));
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// Object-aware attention on plain matrices. `gate` is `L x d` or `1 x d`.
pub fn oasa_attention<T: Real>(
    gate: &Array2<T>,
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
) -> Result<Array2<T>> {
    let d = q.ncols();
    if d == 0 {
        return Err(Error::Contract(
            "attention width d_k must be positive".into(),
        ));
    }
    if k.ncols() != d || k.nrows() != v.nrows() {
        return Err(Error::Contract(
            "query/key widths or key/value lengths differ".into(),
        ));
    }
    if gate.ncols() != d || (gate.nrows() != 1 && gate.nrows() != q.nrows()) {
        return Err(Error::Contract(
            "gate is not broadcastable to the query".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars = [gate, q, k, v].map(|a| tape.constant(a.clone()));
    let out = oasa_on_tape(&mut tape, vars[0], vars[1], vars[2], vars[3]);
    Ok(tape.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct AnomalyMap {
    pub pixel_scores: Array2<f32>,
    pub image_score: f32,
}

/// Smoothing kernel applied at token resolution (Gaussian, σ = 1, radius 2).
pub fn smoothing_kernel() -> [[f32; 5]; 5] {
    let mut k = [[0.0f32; 5]; 5];
    let mut sum = 0.0;
    for (y, row) in k.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f32 - 2.0, x as f32 - 2.0);
            *v = (-(dx * dx + dy * dy) / 2.0).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

fn smooth(map: &Array2<f32>) -> Array2<f32> {
    let k = smoothing_kernel();
    let (h, w) = map.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for (ky, row) in k.iter().enumerate() {
            for (kx, &wgt) in row.iter().enumerate() {
                let (sy, sx) = (y as isize + ky as isize - 2, x as isize + kx as isize - 2);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    acc += wgt * map[[sy as usize, sx as usize]];
                }
            }
        }
        acc
    })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(map: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = map.dim();
    if (h, w) == (out_h, out_w) {
        return map.clone();
    }
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let src = ((o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f32)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, ty) = coord(y, h, out_h);
        let (x0, x1, tx) = coord(x, w, out_w);
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bottom = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Per-location squared error summed over channels, smoothed, then upsampled
/// to `out_hw`. The image score is the maximum pixel score.
pub fn anomaly_map(
    x_target: &Array3<f32>,
    x_hat: &Array3<f32>,
    out_hw: (usize, usize),
) -> Result<AnomalyMap> {
    if x_target.dim() != x_hat.dim() {
        return Err(Error::Contract(format!(
            "target shape {:?} != reconstruction shape {:?}",
            x_target.dim(),
            x_hat.dim()
        )));
    }
    let (c, h, w) = x_target.dim();
    let err = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c)
            .map(|ch| {
                let d = x_target[[ch, y, x]] - x_hat[[ch, y, x]];
                d * d
            })
            .sum::<f32>()
    });
    let pixel_scores = upsample_bilinear(&smooth(&err), out_hw.0, out_hw.1);
    let image_score = pixel_scores.iter().copied().fold(0.0f32, f32::max);
    Ok(AnomalyMap {
        pixel_scores,
        image_score,
    })
}

/// Gaussian noise `L x F` with standard deviation `scale * rms(target)`.
pub fn feature_jitter(target: &Array2<f32>, scale: f32, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let rms = (target.iter().map(|v| v * v).sum::<f32>() / target.len().max(1) as f32).sqrt();
    let sigma = scale * rms;
    if sigma <= 0.0 {
        return Array2::zeros(target.dim());
    }
    let dist = Normal::new(0.0f32, sigma).expect("positive sigma");
    Array2::from_shape_fn(target.dim(), |_| dist.sample(rng))
}

/// Random image in `[0, 1]`, for tests and smoke checks.
pub fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    Array3::from_shape_fn((3, size, size), |_| rng.random_range(0.0..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch: 4,
            feat_dim: 12,
            latent_channels: 8,
            ffn_hidden: 8,
            enc_blocks: 1,
            dec_blocks: 1,
            n_max: 4,
            disc_channels: vec![4, 4],
            ..Default::default()
        }
    }

    #[test]
    fn gates_are_identity_at_init_and_deterministic() {
        let m = ModelState::new(small_config(), 1, 2).unwrap();
        let img = random_image(16, &mut seed::rng(5));
        let (logits, gates) = m.discriminate(&img).unwrap();
        assert_eq!(logits.len(), 4);
        assert_eq!(gates.layer_count(), 2);
        assert!(gates.per_layer.iter().all(|g| g.iter().all(|&v| v == 1.0)));
        let again = m.discriminate(&img).unwrap();
        assert_eq!(again.0, logits);
        assert_eq!(again.1, gates);
        let (zero_logits, _) = m.discriminate(&Array3::zeros((3, 16, 16))).unwrap();
        assert!(zero_logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reconstruct_shapes_and_gate_count() {
        let m = ModelState::new(small_config(), 1, 2).unwrap();
        let img = random_image(16, &mut seed::rng(6));
        let (_, gates) = m.discriminate(&img).unwrap();
        let r = m.reconstruct(&img, &gates).unwrap();
        assert_eq!(r.x_hat.dim(), r.target.dim());
        assert_eq!(r.latent.dim(), (16, 8));
        let r2 = m.reconstruct(&img, &gates).unwrap();
        assert_eq!(r.x_hat, r2.x_hat);
        let bad = GateFeatures::identity(3, 8);
        assert!(matches!(m.reconstruct(&img, &bad), Err(Error::Contract(_))));
        assert!(m.reconstruct(&Array3::zeros((3, 8, 8)), &gates).is_err());
    }

    #[test]
    fn projectable_params_are_decoder_side_with_latent_rows() {
        let m = ModelState::new(ModelConfig::default(), 1, 2).unwrap();
        let names: Vec<&str> = m
            .params
            .entries
            .iter()
            .filter(|e| e.projectable)
            .map(|e| e.name.as_str())
            .collect();
        assert!(names.contains(&"dec0.q.w"));
        assert!(names.contains(&"dec1.ffn1.w"));
        assert!(names.contains(&"rec.out.w"));
        assert!(!names.contains(&"dec0.ffn2.w"));
        assert!(!names.iter().any(|n| n.starts_with("enc")));
        for e in m.params.entries.iter().filter(|e| e.projectable) {
            assert_eq!(e.value.nrows(), 64);
        }
    }

    #[test]
    fn attention_singleton_and_errors() {
        let q = array![[0.3, -1.0]];
        let v = array![[4.0, 7.0]];
        let out = oasa_attention(&array![[1.5, 0.5]], &q, &q, &v).unwrap();
        assert_eq!(out, v);
        let empty = Array2::<f64>::zeros((1, 0));
        assert!(oasa_attention(&empty, &empty, &empty, &empty).is_err());
    }

    #[test]
    fn perfect_reconstruction_scores_zero() {
        let x = Array3::from_shape_fn((4, 8, 8), |(c, y, x)| (c + y * x) as f32 * 0.01);
        let m = anomaly_map(&x, &x, (64, 64)).unwrap();
        assert_eq!(m.image_score, 0.0);
        assert!(m.pixel_scores.iter().all(|&v| v == 0.0));
        assert_eq!(m.pixel_scores.dim(), (64, 64));
    }

    #[test]
    fn residual_scaling_is_quadratic() {
        let mut rng = seed::rng(3);
        let x = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0f32..1.0));
        let y = Array3::from_shape_fn((3, 8, 8), |_| rng.random_range(-1.0f32..1.0));
        let base = anomaly_map(&x, &y, (32, 32)).unwrap();
        let alpha = 3.0f32;
        let y2 = &x + &((&y - &x) * alpha);
        let scaled = anomaly_map(&x, &y2, (32, 32)).unwrap();
        assert!(
            (scaled.image_score - alpha * alpha * base.image_score).abs()
                < 1e-3 * scaled.image_score
        );
        let argmax = |m: &Array2<f32>| {
            m.indexed_iter()
                .fold(
                    ((0, 0), f32::MIN),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        };
        assert_eq!(argmax(&base.pixel_scores), argmax(&scaled.pixel_scores));
    }
}
