//! The two-branch model: shared mask-passing encoder, top-k selection,
//! spatio-temporal graph decoders, node classifier and reconstruction head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{apply_gate, global_spatial_attention, mask_passing_aggregate, GsaParams, TsmpLayerParams};
use crate::autodiff::{Axis, SoftmaxMask, Var};
use crate::error::{Error, Result};
use crate::graph::TactileGraph;
use crate::params::{Binder, Group, ParamId, ParamStore, Support};
use crate::tensor::Mat;

/// Slope of the leaky ReLU inside the graph attention logits.
pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;
/// Kernel sizes of the multiscale reconstruction head.
pub const RECON_KERNELS: [usize; 3] = [3, 5, 7];

/// Switches that remove one component from the model or the training loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_topk: bool,
    pub no_gsa: bool,
    pub no_ssl: bool,
    pub no_st_decoder: bool,
    pub no_tsmp: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = ["no_topk", "no_gsa", "no_ssl", "no_st_decoder", "no_tsmp"];

    /// Parse a comma-separated list such as `no_topk,no_gsa`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let mut a = Self::default();
        for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
            a.set(name, true)?;
        }
        Ok(a)
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "no_topk" => &mut self.no_topk,
            "no_gsa" => &mut self.no_gsa,
            "no_ssl" => &mut self.no_ssl,
            "no_st_decoder" => &mut self.no_st_decoder,
            "no_tsmp" => &mut self.no_tsmp,
            other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
        };
        *slot = on;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        match name {
            "no_topk" => Some(self.no_topk),
            "no_gsa" => Some(self.no_gsa),
            "no_ssl" => Some(self.no_ssl),
            "no_st_decoder" => Some(self.no_st_decoder),
            "no_tsmp" => Some(self.no_tsmp),
            _ => None,
        }
    }

    pub fn to_list(&self) -> String {
        Self::NAMES
            .iter()
            .filter(|n| self.get(n) == Some(true))
            .copied()
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub nodes: usize,
    pub bands: usize,
    pub steps: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    /// Output channels of each main decoder block.
    pub main_channels: Vec<usize>,
    /// Hidden channels of the SSL decoder; a final block back to `bands` is
    /// appended so the reconstruction head sees `F×T` per node.
    pub ssl_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub tcn_kernel: usize,
    pub topk_ratio: f64,
    /// Apply top-k on the SSL path as well.
    pub ssl_topk: bool,
    pub pe_scale_init: f64,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            nodes: 24,
            bands: 16,
            steps: 32,
            heads: 1,
            encoder_layers: 2,
            main_channels: vec![32, 32],
            ssl_hidden: vec![32],
            classifier_hidden: vec![128, 128],
            tcn_kernel: 2,
            topk_ratio: 0.8,
            ssl_topk: false,
            pe_scale_init: 0.1,
            ablations: Ablations::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nodes == 0 || self.bands == 0 || self.steps == 0 {
            return bad("nodes, bands and steps must be positive".into());
        }
        if self.bands % 2 != 0 {
            return bad(format!("bands must be even for the positional table, got {}", self.bands));
        }
        if self.heads == 0 {
            return bad("heads must be at least 1".into());
        }
        if self.main_channels.is_empty() || self.main_channels.contains(&0) {
            return bad("main decoder needs at least one block with positive width".into());
        }
        if self.ssl_hidden.contains(&0) || self.classifier_hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.tcn_kernel == 0 {
            return bad("tcn kernel must be at least 1".into());
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return bad(format!("topk ratio {} outside (0, 1]", self.topk_ratio));
        }
        Ok(())
    }

    /// Embedding width seen by the classifier.
    pub fn embedding_dim(&self) -> usize {
        if self.ablations.no_st_decoder {
            self.bands
        } else {
            *self.main_channels.last().expect("validated")
        }
    }
}

#[derive(Clone, Debug)]
pub struct GatParams {
    pub channels: usize,
    pub w_src: ParamId,
    pub w_dst: ParamId,
    pub attn: ParamId,
    pub w_edge: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderBlockParams {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub gsa: GsaParams,
    pub tcn_w: ParamId,
    pub tcn_b: ParamId,
    pub gat: GatParams,
}

impl DecoderBlockParams {
    #[allow(clippy::too_many_arguments)]
    fn init<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        nodes: usize,
        steps: usize,
        (c_in, c_out): (usize, usize),
        kernel: usize,
        index: usize,
        group: Group,
    ) -> Self {
        let gsa = GsaParams::init(store, rng, &format!("{prefix}.gsa"), nodes, c_in, steps, group);
        let fan = he_bound(c_in * kernel);
        let bc = 1.0 / (c_out as f64).sqrt();
        let tcn_w = store.add_uniform(rng, format!("{prefix}.tcn_w"), (c_out, c_in * kernel), fan, group, Support::Full);
        let tcn_b = store.add(format!("{prefix}.tcn_b"), Mat::zeros(c_out, 1), group, Support::Full);
        let gat = GatParams {
            channels: c_out,
            w_src: store.add_uniform(rng, format!("{prefix}.gat.w_src"), (c_out, c_out), bc, group, Support::Full),
            w_dst: store.add_uniform(rng, format!("{prefix}.gat.w_dst"), (c_out, c_out), bc, group, Support::Full),
            attn: store.add_uniform(rng, format!("{prefix}.gat.attn"), (c_out, 1), bc, group, Support::Full),
            w_edge: store.add_uniform(rng, format!("{prefix}.gat.w_edge"), (1, 1), 1.0, group, Support::Full),
            bias: store.add(format!("{prefix}.gat.bias"), Mat::zeros(c_out, 1), group, Support::Full),
        };
        Self {
            c_in,
            c_out,
            kernel,
            dilation: 1 << index,
            gsa,
            tcn_w,
            tcn_b,
            gat,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    /// `(weight in×out, bias 1×out)` per layer; the last layer has one output.
    pub layers: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct ReconHeadParams {
    /// `F×k` depthwise kernels, one per entry of [`RECON_KERNELS`].
    pub kernels: Vec<ParamId>,
    pub mix_w: ParamId,
    pub mix_b: ParamId,
}

/// Parameter handles, grouped by branch.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub pe_scale: ParamId,
    pub encoder_layers: Vec<TsmpLayerParams>,
    pub main_decoder_blocks: Vec<DecoderBlockParams>,
    pub ssl_decoder_blocks: Vec<DecoderBlockParams>,
    pub classifier: ClassifierParams,
    pub recon_head: ReconHeadParams,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// Uniform bound that keeps activation variance through a ReLU layer.
pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Sinusoidal table: `PE[2i, t] = sin(t / 10000^(2i/F))`, `PE[2i+1, t] = cos(...)`.
pub fn positional_encoding(bands: usize, steps: usize) -> Result<Mat> {
    if bands % 2 != 0 {
        return Err(Error::InvalidInput(format!("positional table needs an even band count, got {bands}")));
    }
    Ok(Mat::from_fn(bands, steps, |f, t| {
        let i = (f / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / bands as f64);
        if f % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

/// 0/1 keep-masks for the `⌈ratio·n⌉` largest-magnitude entries across all
/// nodes. Ties go to the lower flat index (node-major, then row-major).
pub fn topk_masks(values: &[&Mat], ratio: f64) -> Result<Vec<Mat>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidInput(format!("topk ratio {ratio} outside (0, 1]")));
    }
    let n: usize = values.iter().map(|m| m.len()).sum();
    let keep = ((ratio * n as f64).ceil() as usize).min(n);
    let flat: Vec<f64> = values.iter().flat_map(|m| m.data.iter().map(|v| v.abs())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    let mut mask = vec![0.0; n];
    for &k in &order[..keep] {
        mask[k] = 1.0;
    }
    let mut out = Vec::with_capacity(values.len());
    let mut off = 0;
    for m in values {
        out.push(Mat::from_vec(m.rows, m.cols, mask[off..off + m.len()].to_vec()));
        off += m.len();
    }
    Ok(out)
}

/// Hard top-k with a straight-through gradient on the kept entries.
pub fn topk_select(b: &mut Binder<'_>, h: &[Var], ratio: f64) -> Result<Vec<Var>> {
    let masks = {
        let vals: Vec<&Mat> = h.iter().map(|&v| b.tape.value(v)).collect();
        topk_masks(&vals, ratio)?
    };
    Ok(h.iter()
        .zip(masks)
        .map(|(&v, m)| b.tape.mul_const(v, Arc::new(m)))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskGranularity {
    Element,
    /// Whole runs of `patch_len` time steps, across all bands of a node.
    TimePatch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub rate: f64,
    pub granularity: MaskGranularity,
    pub patch_len: usize,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            rate: 0.1,
            granularity: MaskGranularity::Element,
            patch_len: 4,
            seed: 0,
        }
    }
}

/// `(x ⊙ M, M)` with `M` drawn from `spec`.
pub fn mask_input(x: &[Mat], spec: &MaskSpec) -> Result<(Vec<Mat>, Vec<Mat>)> {
    if !(0.0..1.0).contains(&spec.rate) {
        return Err(Error::InvalidInput(format!("mask rate {} outside [0, 1)", spec.rate)));
    }
    if spec.patch_len == 0 {
        return Err(Error::InvalidInput("patch length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let masks: Vec<Mat> = x
        .iter()
        .map(|xi| match spec.granularity {
            MaskGranularity::Element => Mat::from_fn(xi.rows, xi.cols, |_, _| {
                if rng.gen::<f64>() < spec.rate {
                    0.0
                } else {
                    1.0
                }
            }),
            MaskGranularity::TimePatch => {
                let patches = xi.cols.div_ceil(spec.patch_len);
                let drop: Vec<bool> = (0..patches).map(|_| rng.gen::<f64>() < spec.rate).collect();
                Mat::from_fn(xi.rows, xi.cols, |_, t| if drop[t / spec.patch_len] { 0.0 } else { 1.0 })
            }
        })
        .collect();
    let masked = x.iter().zip(&masks).map(|(a, m)| a.zip_map(m, |v, k| v * k)).collect();
    Ok((masked, masks))
}

/// Outputs of the main branch for one sample.
#[derive(Clone, Debug)]
pub struct MainOutput {
    pub latent: Vec<Var>,
    pub selected: Vec<Var>,
    /// `N×D`
    pub embedding: Var,
    /// `N×1` scores in (0, 1).
    pub scores: Var,
}

/// Outputs of the self-supervised branch for one sample.
#[derive(Clone, Debug)]
pub struct SslOutput {
    pub latent: Vec<Var>,
    pub decoded: Vec<Var>,
    pub recon: Vec<Var>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let c = &config;
        let pe_scale = store.add("pe_scale", Mat::scalar(c.pe_scale_init), Group::Shared, Support::Full);
        let encoder_layers = (0..c.encoder_layers)
            .map(|l| {
                TsmpLayerParams::init(&mut store, &mut rng, &format!("encoder.{l}"), c.bands, c.steps, c.heads, Group::Shared)
            })
            .collect();
        let decoder = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, widths: &[usize], group| {
            let mut c_in = c.bands;
            widths
                .iter()
                .enumerate()
                .map(|(r, &c_out)| {
                    let blk = DecoderBlockParams::init(
                        store,
                        rng,
                        &format!("{name}.{r}"),
                        c.nodes,
                        c.steps,
                        (c_in, c_out),
                        c.tcn_kernel,
                        r,
                        group,
                    );
                    c_in = c_out;
                    blk
                })
                .collect::<Vec<_>>()
        };
        let main_decoder_blocks = decoder(&mut store, &mut rng, "main_decoder", &c.main_channels, Group::Main);
        let mut ssl_widths = c.ssl_hidden.clone();
        ssl_widths.push(c.bands);
        let ssl_decoder_blocks = decoder(&mut store, &mut rng, "ssl_decoder", &ssl_widths, Group::Ssl);

        let mut dims = vec![c.embedding_dim()];
        dims.extend(&c.classifier_hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let bound = he_bound(w[0]);
                let wid =
                    store.add_uniform(&mut rng, format!("classifier.{l}.w"), (w[0], w[1]), bound, Group::Main, Support::Full);
                let bid = store.add(format!("classifier.{l}.b"), Mat::zeros(1, w[1]), Group::Main, Support::Full);
                (wid, bid)
            })
            .collect();
        let kernels = RECON_KERNELS
            .iter()
            .map(|&k| {
                let bound = 1.0 / k as f64;
                store.add_uniform(&mut rng, format!("recon.k{k}"), (c.bands, k), bound, Group::Ssl, Support::Full)
            })
            .collect();
        let mix_w = store.add_uniform(
            &mut rng,
            "recon.mix_w",
            (c.bands, c.bands),
            1.0 / (c.bands as f64).sqrt(),
            Group::Ssl,
            Support::Full,
        );
        let mix_b = store.add("recon.mix_b", Mat::zeros(c.bands, 1), Group::Ssl, Support::Full);
        let params = ModelParams {
            pe_scale,
            encoder_layers,
            main_decoder_blocks,
            ssl_decoder_blocks,
            classifier: ClassifierParams { layers },
            recon_head: ReconHeadParams { kernels, mix_w, mix_b },
        };
        Ok(Self { config, store, params })
    }

    fn check_input(&self, b: &Binder<'_>, g: &TactileGraph, x: &[Var]) -> Result<()> {
        let c = &self.config;
        if g.node_count() != c.nodes || x.len() != c.nodes {
            return Err(Error::Shape(format!(
                "model expects {} nodes, got graph {} / input {}",
                c.nodes,
                g.node_count(),
                x.len()
            )));
        }
        for &xi in x {
            let s = b.tape.value(xi).shape();
            if s != (c.bands, c.steps) {
                return Err(Error::Shape(format!("node input {s:?}, model expects {}×{}", c.bands, c.steps)));
            }
        }
        Ok(())
    }

    /// Positional encoding plus the stacked mask-passing layers.
    pub fn encode(&self, b: &mut Binder<'_>, g: &TactileGraph, x: &[Var]) -> Result<Vec<Var>> {
        self.encode_with(b, g, x, false)
    }

    /// `unit_gate` bypasses every gate (test hook).
    pub fn encode_with(&self, b: &mut Binder<'_>, g: &TactileGraph, x: &[Var], unit_gate: bool) -> Result<Vec<Var>> {
        self.check_input(b, g, x)?;
        let pe = Arc::new(positional_encoding(self.config.bands, self.config.steps)?);
        let scale = b.param(self.params.pe_scale);
        let pe = b.tape.constant((*pe).clone());
        let pe = b.tape.scalar_mul(scale, pe);
        let mut h: Vec<Var> = x.iter().map(|&xi| b.tape.add(xi, pe)).collect();
        if self.config.ablations.no_tsmp || unit_gate {
            return Ok(h);
        }
        for layer in &self.params.encoder_layers {
            let out = mask_passing_aggregate(b, &h, g, layer, false)?;
            h = apply_gate(b, &h, &out);
        }
        Ok(h)
    }

    /// Causal dilated convolution with bias and, when widths match, a residual.
    pub fn tcn_forward(&self, b: &mut Binder<'_>, x: &[Var], blk: &DecoderBlockParams) -> Vec<Var> {
        let w = b.param(blk.tcn_w);
        let bias = b.param(blk.tcn_b);
        x.iter()
            .map(|&xi| {
                let t = &mut b.tape;
                let y = t.causal_conv(xi, w, blk.kernel, blk.dilation);
                let y = t.add_col_bcast(y, bias);
                if blk.c_in == blk.c_out {
                    t.add(y, xi)
                } else {
                    y
                }
            })
            .collect()
    }

    /// Graph attention per time step over `{i} ∪ N(i)`; `s` adds
    /// `w_edge·S'[i, j]` to the logit of edge `j → i`.
    pub fn gat_forward(&self, b: &mut Binder<'_>, y: &[Var], g: &TactileGraph, s: Option<Var>, p: &GatParams) -> Vec<Var> {
        gat_forward(b, y, g, s, p)
    }

    fn block_forward(&self, b: &mut Binder<'_>, x: &[Var], g: &TactileGraph, blk: &DecoderBlockParams) -> Result<Vec<Var>> {
        let s = if self.config.ablations.no_gsa {
            None
        } else {
            Some(global_spatial_attention(b, x, &blk.gsa)?)
        };
        let y = self.tcn_forward(b, x, blk);
        let z = gat_forward(b, &y, g, s, &blk.gat);
        Ok(z.iter()
            .zip(&y)
            .map(|(&zi, &yi)| {
                let r = b.tape.relu(zi);
                b.tape.add(r, yi)
            })
            .collect())
    }

    fn run_blocks(&self, b: &mut Binder<'_>, x: &[Var], g: &TactileGraph, blocks: &[DecoderBlockParams]) -> Result<Vec<Var>> {
        let mut h = x.to_vec();
        for blk in blocks {
            h = self.block_forward(b, &h, g, blk)?;
        }
        Ok(h)
    }

    /// Time-pooled per-node embedding, `N×D`.
    pub fn decode_main(&self, b: &mut Binder<'_>, h: &[Var], g: &TactileGraph) -> Result<Var> {
        let out = if self.config.ablations.no_st_decoder {
            h.to_vec()
        } else {
            self.run_blocks(b, h, g, &self.params.main_decoder_blocks)?
        };
        let pooled: Vec<Var> = out.iter().map(|&o| b.tape.row_means(o)).collect();
        let cols = b.tape.concat_cols(&pooled);
        Ok(b.tape.transpose(cols))
    }

    /// Per-node MLP with logistic output; `emb` is `N×D`, result `N×1`.
    pub fn classify(&self, b: &mut Binder<'_>, emb: Var) -> Var {
        let layers = &self.params.classifier.layers;
        let mut h = emb;
        for (l, &(w, bias)) in layers.iter().enumerate() {
            let (w, bias) = (b.param(w), b.param(bias));
            let t = &mut b.tape;
            let z = t.matmul(h, w);
            let z = t.add_row_bcast(z, bias);
            h = if l + 1 == layers.len() { t.sigmoid(z) } else { t.relu(z) };
        }
        h
    }

    pub fn decode_ssl(&self, b: &mut Binder<'_>, h: &[Var], g: &TactileGraph) -> Result<Vec<Var>> {
        self.run_blocks(b, h, g, &self.params.ssl_decoder_blocks)
    }

    /// Multiscale depthwise causal convolutions, summed, then a band mix.
    pub fn reconstruct(&self, b: &mut Binder<'_>, z: &[Var]) -> Vec<Var> {
        let p = &self.params.recon_head;
        let kernels: Vec<Var> = p.kernels.iter().map(|&k| b.param(k)).collect();
        let (mix_w, mix_b) = (b.param(p.mix_w), b.param(p.mix_b));
        z.iter()
            .map(|&zi| {
                let t = &mut b.tape;
                let mut acc: Option<Var> = None;
                for &k in &kernels {
                    let c = t.depthwise_causal_conv(zi, k, 1);
                    acc = Some(match acc {
                        Some(a) => t.add(a, c),
                        None => c,
                    });
                }
                let mixed = t.matmul(mix_w, acc.expect("at least one kernel"));
                t.add_col_bcast(mixed, mix_b)
            })
            .collect()
    }

    pub fn forward_main(&self, b: &mut Binder<'_>, g: &TactileGraph, x: &[Var]) -> Result<MainOutput> {
        let latent = self.encode(b, g, x)?;
        let selected = if self.config.ablations.no_topk {
            latent.clone()
        } else {
            topk_select(b, &latent, self.config.topk_ratio)?
        };
        let embedding = self.decode_main(b, &selected, g)?;
        let scores = self.classify(b, embedding);
        Ok(MainOutput {
            latent,
            selected,
            embedding,
            scores,
        })
    }

    /// SSL branch on an already-masked input.
    pub fn forward_ssl(&self, b: &mut Binder<'_>, g: &TactileGraph, x_masked: &[Var]) -> Result<SslOutput> {
        let latent = self.encode(b, g, x_masked)?;
        let input = if self.config.ssl_topk && !self.config.ablations.no_topk {
            topk_select(b, &latent, self.config.topk_ratio)?
        } else {
            latent.clone()
        };
        let decoded = self.decode_ssl(b, &input, g)?;
        let recon = self.reconstruct(b, &decoded);
        Ok(SslOutput { latent, decoded, recon })
    }

    /// Inference: per-node scores and embedding rows.
    pub fn predict(&self, g: &TactileGraph, x: &[Mat]) -> Result<(Vec<f64>, Mat)> {
        let mut b = Binder::new(&self.store);
        let xv: Vec<Var> = x.iter().map(|m| b.tape.constant(m.clone())).collect();
        let out = self.forward_main(&mut b, g, &xv)?;
        Ok((b.tape.value(out.scores).data.clone(), b.tape.value(out.embedding).clone()))
    }

    /// A copy whose node-indexed parameters follow the relabeling
    /// `new[perm[i]] = old[i]`.
    pub fn permuted_nodes(&self, perm: &[usize]) -> Result<Self> {
        let n = self.config.nodes;
        if perm.len() != n {
            return Err(Error::InvalidInput(format!("permutation of length {} for {n} nodes", perm.len())));
        }
        let mut out = self.clone();
        let blocks = self.params.main_decoder_blocks.iter().chain(&self.params.ssl_decoder_blocks);
        for blk in blocks {
            for id in [blk.gsa.v_s, blk.gsa.b_s] {
                let old = self.store.get(id);
                let mut new = Mat::zeros(n, n);
                for r in 0..n {
                    for c in 0..n {
                        new.set(perm[r], perm[c], old.get(r, c));
                    }
                }
                out.store.set(id, new);
            }
        }
        Ok(out)
    }
}

/// See [`Model::gat_forward`].
pub fn gat_forward(b: &mut Binder<'_>, y: &[Var], g: &TactileGraph, s: Option<Var>, p: &GatParams) -> Vec<Var> {
    let (w_src, w_dst, attn, w_edge, bias) =
        (b.param(p.w_src), b.param(p.w_dst), b.param(p.attn), b.param(p.w_edge), b.param(p.bias));
    let t = &mut b.tape;
    let src: Vec<Var> = y.iter().map(|&yi| t.matmul(w_src, yi)).collect();
    let dst: Vec<Var> = y.iter().map(|&yi| t.matmul(w_dst, yi)).collect();
    (0..y.len())
        .map(|i| {
            let members: Vec<usize> = std::iter::once(i).chain(g.in_neighbors(i).iter().copied()).collect();
            let rows: Vec<Var> = members
                .iter()
                .map(|&j| {
                    let e = t.add(dst[i], src[j]);
                    let e = t.leaky_relu(e, GAT_NEGATIVE_SLOPE);
                    let logit = t.matmul_tn(attn, e);
                    match s {
                        Some(s) => {
                            let sij = t.element(s, i, j);
                            let term = t.mul(w_edge, sij);
                            t.add_scalar(logit, term)
                        }
                        None => logit,
                    }
                })
                .collect();
            let logits = t.concat_rows(&rows);
            let alpha = t.softmax(logits, Axis::Cols, SoftmaxMask::None);
            let mut acc: Option<Var> = None;
            for (r, &j) in members.iter().enumerate() {
                let a = t.select_row(alpha, r);
                let m = t.mul_row_bcast(src[j], a);
                acc = Some(match acc {
                    Some(x) => t.add(x, m),
                    None => m,
                });
            }
            t.add_col_bcast(acc.expect("self loop"), bias)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::logistic;
    use crate::graph::{build_graph, Strategy};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            nodes: 3,
            bands: 4,
            steps: 8,
            heads: 2,
            encoder_layers: 1,
            main_channels: vec![5],
            ssl_hidden: vec![],
            classifier_hidden: vec![6],
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn graph3() -> TactileGraph {
        build_graph(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]], Strategy::Full).unwrap()
    }

    fn rand_inputs(n: usize, f: usize, t: usize, seed: u64) -> Vec<Mat> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Mat::from_fn(f, t, |_, _| rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn positional_table() {
        let pe = positional_encoding(16, 32).unwrap();
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(1, 0), 1.0);
        assert!(pe.data.iter().all(|v| v.abs() <= 1.0));
        assert!((pe.get(0, 3) - 3f64.sin()).abs() < 1e-15);
        assert!((pe.get(3, 5) - (5.0 / 10000f64.powf(2.0 / 16.0)).cos()).abs() < 1e-15);
        assert!(positional_encoding(3, 4).is_err());
    }

    #[test]
    fn topk_examples() {
        let v = Mat::from_vec(1, 4, vec![3.0, -1.0, 0.5, -2.0]);
        let m = topk_masks(&[&v], 0.5).unwrap();
        assert_eq!(m[0].data, vec![1.0, 0.0, 0.0, 1.0]);
        let all = topk_masks(&[&v], 1.0).unwrap();
        assert!(all[0].data.iter().all(|&k| k == 1.0));
        let tie = Mat::from_vec(1, 3, vec![1.0, -1.0, 1.0]);
        assert_eq!(topk_masks(&[&tie], 0.5).unwrap()[0].data, vec![1.0, 1.0, 0.0]);
        assert!(topk_masks(&[&v], 0.0).is_err());
    }

    #[test]
    fn mask_rate_zero_and_determinism() {
        let x = rand_inputs(2, 4, 8, 1);
        let spec = MaskSpec { rate: 0.0, ..MaskSpec::default() };
        let (xm, m) = mask_input(&x, &spec).unwrap();
        assert_eq!(xm, x);
        assert!(m.iter().all(|k| k.data.iter().all(|&v| v == 1.0)));
        let spec = MaskSpec { rate: 0.4, seed: 9, ..MaskSpec::default() };
        assert_eq!(mask_input(&x, &spec).unwrap(), mask_input(&x, &spec).unwrap());
        let spec = MaskSpec {
            rate: 0.5,
            granularity: MaskGranularity::TimePatch,
            patch_len: 4,
            seed: 2,
        };
        let (_, m) = mask_input(&x, &spec).unwrap();
        for k in &m {
            for t in 0..8 {
                let col: Vec<f64> = (0..4).map(|f| k.get(f, t)).collect();
                assert!(col.iter().all(|&v| v == col[0]));
                assert_eq!(k.get(0, t), k.get(0, t / 4 * 4));
            }
        }
    }

    #[test]
    fn unit_gate_hook_and_isolated_node() {
        let cfg = ModelConfig {
            nodes: 1,
            encoder_layers: 2,
            ..tiny_config()
        };
        let mut model = Model::new(cfg).unwrap();
        for l in model.params.encoder_layers.clone() {
            model.store.set(l.fusion_b, Mat::scalar(0.3));
        }
        let g = TactileGraph::from_edges(vec![[0.0, 0.0]], &[]).unwrap();
        let x = rand_inputs(1, 4, 8, 5);
        let pe = positional_encoding(4, 8).unwrap().map(|v| 0.1 * v);
        let expect = x[0].zip_map(&pe, |a, p| a + p);
        let mut b = Binder::new(&model.store);
        let xv = [b.tape.constant(x[0].clone())];
        let h = model.encode_with(&mut b, &g, &xv, true).unwrap();
        assert!(b.tape.value(h[0]).zip_map(&expect, |a, e| a - e).max_abs() < 1e-15);
        let h = model.encode(&mut b, &g, &xv).unwrap();
        let gate = logistic(0.3);
        let want = expect.map(|v| v * gate * gate);
        assert!(b.tape.value(h[0]).zip_map(&want, |a, e| a - e).max_abs() < 1e-15);
    }

    #[test]
    fn tcn_impulse_and_identity_kernel() {
        let cfg = ModelConfig {
            nodes: 1,
            bands: 2,
            steps: 12,
            main_channels: vec![2, 2],
            ..tiny_config()
        };
        let mut model = Model::new(cfg).unwrap();
        let blk = model.params.main_decoder_blocks[1].clone();
        assert_eq!((blk.kernel, blk.dilation), (2, 2));
        // Residual disabled by checking the conv part on a zero-bias block:
        // output = conv(x) + x.
        model.store.set(blk.tcn_w, Mat::from_vec(2, 4, vec![1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 2.0, -1.0]));
        let mut b = Binder::new(&model.store);
        let mut imp = Mat::zeros(2, 12);
        imp.set(0, 5, 1.0);
        imp.set(1, 5, 1.0);
        let x = [b.tape.constant(imp.clone())];
        let y = model.tcn_forward(&mut b, &x, &blk);
        let yv = b.tape.value(y[0]).zip_map(&imp, |a, r| a - r);
        for t in 0..12 {
            let nz = yv.get(0, t) != 0.0 || yv.get(1, t) != 0.0;
            assert_eq!(nz, t == 5 || t == 7, "t={t}");
        }
        assert_eq!(yv.get(0, 7), 0.5);
        assert_eq!(yv.get(1, 7), -1.0);
    }

    #[test]
    fn gat_single_node_is_self_transform() {
        let model = Model::new(ModelConfig {
            nodes: 1,
            ..tiny_config()
        })
        .unwrap();
        let blk = &model.params.main_decoder_blocks[0];
        let g = TactileGraph::from_edges(vec![[0.0, 0.0]], &[]).unwrap();
        let y0 = rand_inputs(1, 5, 8, 4);
        let mut b = Binder::new(&model.store);
        let y = [b.tape.constant(y0[0].clone())];
        let z = gat_forward(&mut b, &y, &g, None, &blk.gat);
        let expect = model.store.get(blk.gat.w_src).matmul(&y0[0]);
        assert!(b.tape.value(z[0]).zip_map(&expect, |a, e| a - e).max_abs() < 1e-14);
    }

    #[test]
    fn gat_scalar_pair_by_hand() {
        let model = Model::new(ModelConfig {
            nodes: 2,
            bands: 2,
            steps: 1,
            main_channels: vec![1],
            ..tiny_config()
        })
        .unwrap();
        let p = model.params.main_decoder_blocks[0].gat.clone();
        let mut store = model.store.clone();
        let (ws, wd, a, we, bias) = (0.7, -0.4, 1.3, 2.0, 0.05);
        store.set(p.w_src, Mat::scalar(ws));
        store.set(p.w_dst, Mat::scalar(wd));
        store.set(p.attn, Mat::scalar(a));
        store.set(p.w_edge, Mat::scalar(we));
        store.set(p.bias, Mat::scalar(bias));
        let g = TactileGraph::from_edges(vec![[0.0, 0.0], [1.0, 0.0]], &[(1, 0), (0, 1)]).unwrap();
        let s = Mat::from_vec(2, 2, vec![0.6, 0.4, 0.3, 0.7]);
        let ys = [0.5, -1.5];
        let mut b = Binder::new(&store);
        let y: Vec<Var> = ys.iter().map(|&v| b.tape.constant(Mat::scalar(v))).collect();
        let sv = b.tape.constant(s.clone());
        let z = gat_forward(&mut b, &y, &g, Some(sv), &p);
        let lrelu = |v: f64| if v > 0.0 { v } else { GAT_NEGATIVE_SLOPE * v };
        for i in 0..2 {
            let members = [i, 1 - i];
            let logits: Vec<f64> = members
                .iter()
                .map(|&j| a * lrelu(wd * ys[i] + ws * ys[j]) + we * s.get(i, j))
                .collect();
            let zsum: f64 = logits.iter().map(|l| l.exp()).sum();
            let expect: f64 = members
                .iter()
                .zip(&logits)
                .map(|(&j, l)| l.exp() / zsum * ws * ys[j])
                .sum::<f64>()
                + bias;
            assert!((b.tape.scalar_value(z[i]) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_gives_zero_embedding_and_half_scores() {
        let model = Model::new(ModelConfig {
            ablations: Ablations {
                no_tsmp: true,
                ..Ablations::default()
            },
            pe_scale_init: 0.0,
            ..tiny_config()
        })
        .unwrap();
        let x = vec![Mat::zeros(4, 8); 3];
        let (scores, emb) = model.predict(&graph3(), &x).unwrap();
        assert_eq!(emb.max_abs(), 0.0);
        assert!(scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn classifier_bias_is_monotone() {
        let mut model = Model::new(tiny_config()).unwrap();
        let x = rand_inputs(3, 4, 8, 8);
        let (s0, _) = model.predict(&graph3(), &x).unwrap();
        let &(_, last_b) = model.params.classifier.layers.last().unwrap();
        model.store.set(last_b, Mat::scalar(0.5));
        let (s1, _) = model.predict(&graph3(), &x).unwrap();
        for (a, c) in s0.iter().zip(&s1) {
            assert!(c > a && *a > 0.0 && *c < 1.0);
        }
    }

    #[test]
    fn recon_identity_tap_and_support() {
        let cfg = ModelConfig {
            nodes: 1,
            bands: 2,
            steps: 12,
            ..tiny_config()
        };
        let mut model = Model::new(cfg).unwrap();
        let rh = model.params.recon_head.clone();
        for (&k, &size) in rh.kernels.iter().zip(&RECON_KERNELS) {
            let w = if size == 3 {
                Mat::from_fn(2, 3, |_, m| if m == 0 { 1.0 } else { 0.0 })
            } else {
                Mat::zeros(2, size)
            };
            model.store.set(k, w);
        }
        model.store.set(rh.mix_w, Mat::identity(2));
        let x = rand_inputs(1, 2, 12, 3);
        let mut b = Binder::new(&model.store);
        let xv = [b.tape.constant(x[0].clone())];
        let r = model.reconstruct(&mut b, &xv);
        assert_eq!(b.tape.value(r[0]), &x[0]);

        for (&k, &size) in rh.kernels.iter().zip(&RECON_KERNELS) {
            let w = if size == 7 { Mat::filled(2, 7, 1.0) } else { Mat::zeros(2, size) };
            model.store.set(k, w);
        }
        let mut imp = Mat::zeros(2, 12);
        imp.set(0, 2, 1.0);
        let mut b = Binder::new(&model.store);
        let xv = [b.tape.constant(imp)];
        let r = model.reconstruct(&mut b, &xv);
        let support: Vec<usize> = (0..12).filter(|&t| b.tape.value(r[0]).get(0, t) != 0.0).collect();
        assert_eq!(support, (2..9).collect::<Vec<_>>());
    }

    #[test]
    fn shapes_at_default_size() {
        let model = Model::new(ModelConfig {
            heads: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let g = crate::graph::default_graph();
        let x = rand_inputs(24, 16, 32, 1);
        let mut b = Binder::new(&model.store);
        let xv: Vec<Var> = x.iter().map(|m| b.tape.constant(m.clone())).collect();
        let main = model.forward_main(&mut b, &g, &xv).unwrap();
        assert_eq!(b.tape.value(main.latent[0]).shape(), (16, 32));
        assert_eq!(b.tape.value(main.embedding).shape(), (24, 32));
        assert_eq!(b.tape.value(main.scores).shape(), (24, 1));
        let ssl = model.forward_ssl(&mut b, &g, &xv).unwrap();
        assert_eq!(ssl.recon.len(), 24);
        assert_eq!(b.tape.value(ssl.recon[3]).shape(), (16, 32));
    }

    #[test]
    fn relabeling_permutes_outputs() {
        let model = Model::new(tiny_config()).unwrap();
        let mut model = model;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for blk in model.params.main_decoder_blocks.clone() {
            model.store.set(blk.gsa.v_s, Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0)));
            model.store.set(blk.gsa.b_s, Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0)));
        }
        let coords = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
        let g = build_graph(&coords, Strategy::Knn(1)).unwrap();
        let perm = [2, 0, 1];
        let gp = g.permuted(&perm).unwrap();
        let mp = model.permuted_nodes(&perm).unwrap();
        let x = rand_inputs(3, 4, 8, 42);
        let mut xp = x.clone();
        for i in 0..3 {
            xp[perm[i]] = x[i].clone();
        }
        let (s, e) = model.predict(&g, &x).unwrap();
        let (sp, ep) = mp.predict(&gp, &xp).unwrap();
        for i in 0..3 {
            assert!((s[i] - sp[perm[i]]).abs() < 1e-12);
            for d in 0..e.cols {
                assert!((e.get(i, d) - ep.get(perm[i], d)).abs() < 1e-12);
            }
        }
    }
}
