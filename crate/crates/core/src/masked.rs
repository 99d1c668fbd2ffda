//! Masked transformer over token grids.
//!
//! Training corrupts a grid by masking a cosine-scheduled fraction of cells
//! and minimizes cross-entropy on the masked positions only. Generation runs
//! iterative parallel decoding: predict every masked cell, sample, commit the
//! most confident tokens according to the schedule, re-mask the rest.
//! Inpainting is the same loop with a hard keep-constraint re-imposed after
//! every step, which is what makes condition editing preserve untouched
//! regions exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use faceforge_tensor::ckpt::{self, CheckpointHeader, CkptError, FORMAT_VERSION};
use faceforge_tensor::nn::{normal_init, LayerNorm, Linear, MultiHeadAttention};
use faceforge_tensor::optim::Adam;
use faceforge_tensor::rng::{derive_seed, rng_from_seed, sample_without_replacement};
use faceforge_tensor::{Graph, NodeId, ParamStore, Tensor};
use rand::Rng;

use crate::text::TextEmbedding;
use crate::vq::TokenGrid;

#[derive(Debug, thiserror::Error)]
pub enum MaskedError {
    #[error("mask ratio argument {0} outside [0,1]")]
    RatioOutOfRange(f64),
    #[error("schedule must have at least one step, got {0}")]
    BadSchedule(usize),
    #[error("grid already contains {0} MASK cells")]
    GridHasMask(usize),
    #[error("keep mask has {got} cells, grid has {expected}")]
    KeepMaskLenMismatch { expected: usize, got: usize },
    #[error("kept cell {0} holds MASK; nothing to preserve there")]
    KeptCellMasked(usize),
    #[error("grid is {got_h}x{got_w} with vocab {got_k}; model wants {h}x{w} vocab {k}")]
    GridMismatch {
        h: usize,
        w: usize,
        k: u32,
        got_h: usize,
        got_w: usize,
        got_k: u32,
    },
    #[error("text embedding dim {got} does not match configured {expected}")]
    TextDimMismatch { expected: usize, got: usize },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("checkpoint: {0}")]
    Ckpt(#[from] CkptError),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
}

/// Cosine masking schedule: fraction of cells still hidden at progress u.
///
/// Strictly decreasing on (0,1) with exact endpoints 1 and 0.
pub fn mask_ratio(u: f64) -> Result<f64, MaskedError> {
    if !u.is_finite() || !(0.0..=1.0).contains(&u) {
        return Err(MaskedError::RatioOutOfRange(u));
    }
    Ok((std::f64::consts::FRAC_PI_2 * u).cos())
}

/// Replace exactly `round(ratio * cells)` positions with MASK, chosen
/// uniformly without replacement from the seed. Returns the masked grid and
/// the masked positions in ascending order.
pub fn apply_mask(
    grid: &TokenGrid,
    ratio: f64,
    seed: u64,
) -> Result<(TokenGrid, Vec<usize>), MaskedError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MaskedError::RatioOutOfRange(ratio));
    }
    let masks = grid.mask_count();
    if masks > 0 {
        return Err(MaskedError::GridHasMask(masks));
    }
    let n = grid.len();
    let m = (ratio * n as f64).round() as usize;
    let mut rng = rng_from_seed(seed);
    let mut positions = sample_without_replacement(&mut rng, n, m);
    positions.sort_unstable();
    let mut out = grid.clone();
    let sentinel = grid.mask_sentinel();
    for &p in &positions {
        out.set(p, sentinel);
    }
    Ok((out, positions))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Cosine,
}

/// Decoding schedule: number of parallel-decoding steps.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl MaskSchedule {
    pub fn cosine(steps: usize) -> Result<Self, MaskedError> {
        if steps < 1 {
            return Err(MaskedError::BadSchedule(steps));
        }
        Ok(Self {
            kind: ScheduleKind::Cosine,
            steps,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MaskedTransformerConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    /// Codebook size K; the embedding table has K+1 rows including MASK.
    pub codebook_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    /// Cross-attention context dim (text embedding width).
    pub text_dim: usize,
    pub seed: u64,
}

impl Default for MaskedTransformerConfig {
    fn default() -> Self {
        Self {
            grid_height: 8,
            grid_width: 8,
            codebook_size: 64,
            layers: 2,
            heads: 4,
            model_dim: 64,
            text_dim: 32,
            seed: 0,
        }
    }
}

impl MaskedTransformerConfig {
    pub fn cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn vocab_with_mask(&self) -> usize {
        self.codebook_size + 1
    }

    fn validate(&self) -> Result<(), MaskedError> {
        if self.layers == 0
            || self.heads == 0
            || self.model_dim == 0
            || self.model_dim % self.heads != 0
            || self.codebook_size == 0
            || self.cells() == 0
        {
            return Err(MaskedError::ConfigMismatch(format!("{self:?}")));
        }
        Ok(())
    }
}

struct Block {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    mlp_in: Linear,
    mlp_out: Linear,
}

/// Decoding knobs surfaced on the CLI as --steps / --temperature / --seed.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    pub schedule: MaskSchedule,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            schedule: MaskSchedule {
                kind: ScheduleKind::Cosine,
                steps: 12,
            },
            temperature: 1.0,
            seed: 0,
        }
    }
}

/// Per-step record of the decoding loop.
#[derive(Debug, Clone)]
pub struct DecodingState {
    pub step: usize,
    pub committed: usize,
    pub confidences: Vec<f64>,
}

const TOK_EMB: &str = "mg.tok_emb";
const POS_EMB: &str = "mg.pos_emb";

pub struct MaskedTransformer {
    pub cfg: MaskedTransformerConfig,
    pub params: ParamStore,
    pub step: u64,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    head: Linear,
}

impl MaskedTransformer {
    pub fn new(cfg: MaskedTransformerConfig) -> Result<Self, MaskedError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_from_seed(cfg.seed);
        params.insert(
            TOK_EMB,
            normal_init(&mut rng, &[cfg.vocab_with_mask(), cfg.model_dim], 0.02),
        );
        params.insert(
            POS_EMB,
            normal_init(&mut rng, &[cfg.cells(), cfg.model_dim], 0.02),
        );
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("mg.block{l}");
                Block {
                    ln1: LayerNorm::init(&mut params, &format!("{p}.ln1"), cfg.model_dim),
                    self_attn: MultiHeadAttention::init(
                        &mut params,
                        &mut rng,
                        &format!("{p}.self"),
                        cfg.model_dim,
                        cfg.model_dim,
                        cfg.heads,
                    ),
                    ln2: LayerNorm::init(&mut params, &format!("{p}.ln2"), cfg.model_dim),
                    cross_attn: MultiHeadAttention::init(
                        &mut params,
                        &mut rng,
                        &format!("{p}.cross"),
                        cfg.model_dim,
                        cfg.text_dim,
                        cfg.heads,
                    ),
                    ln3: LayerNorm::init(&mut params, &format!("{p}.ln3"), cfg.model_dim),
                    mlp_in: Linear::init(
                        &mut params,
                        &mut rng,
                        &format!("{p}.mlp_in"),
                        cfg.model_dim,
                        cfg.model_dim * 4,
                    ),
                    mlp_out: Linear::init(
                        &mut params,
                        &mut rng,
                        &format!("{p}.mlp_out"),
                        cfg.model_dim * 4,
                        cfg.model_dim,
                    ),
                }
            })
            .collect();
        let final_ln = LayerNorm::init(&mut params, "mg.final_ln", cfg.model_dim);
        // zero-init head: a fresh model predicts the uniform distribution
        let head = Linear::init_zero(&mut params, "mg.head", cfg.model_dim, cfg.codebook_size);
        Ok(Self {
            cfg,
            params,
            step: 0,
            blocks,
            final_ln,
            head,
        })
    }

    fn check_grid(&self, grid: &TokenGrid) -> Result<(), MaskedError> {
        if grid.height != self.cfg.grid_height
            || grid.width != self.cfg.grid_width
            || grid.vocab != self.cfg.codebook_size as u32
        {
            return Err(MaskedError::GridMismatch {
                h: self.cfg.grid_height,
                w: self.cfg.grid_width,
                k: self.cfg.codebook_size as u32,
                got_h: grid.height,
                got_w: grid.width,
                got_k: grid.vocab,
            });
        }
        Ok(())
    }

    fn check_text(&self, text: &TextEmbedding) -> Result<(), MaskedError> {
        if text.dim() != self.cfg.text_dim {
            return Err(MaskedError::TextDimMismatch {
                expected: self.cfg.text_dim,
                got: text.dim(),
            });
        }
        Ok(())
    }

    /// Token logits `[cells, K]` for a (possibly masked) grid.
    fn logits_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[u32],
        text: &TextEmbedding,
    ) -> NodeId {
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok_table = g.param(store, TOK_EMB);
        let pos = g.param(store, POS_EMB);
        let emb = g.gather_rows(tok_table, &idx);
        let mut x = g.add(emb, pos);
        let ctx = g.constant(text.tokens.clone());
        for b in &self.blocks {
            let n1 = b.ln1.forward(g, store, x);
            let sa = b.self_attn.forward(g, store, n1, None);
            x = g.add(x, sa);
            let n2 = b.ln2.forward(g, store, x);
            let ca = b.cross_attn.forward(g, store, n2, Some(ctx));
            x = g.add(x, ca);
            let n3 = b.ln3.forward(g, store, x);
            let h = b.mlp_in.forward(g, store, n3);
            let h = g.silu(h);
            let h = b.mlp_out.forward(g, store, h);
            x = g.add(x, h);
        }
        let xf = self.final_ln.forward(g, store, x);
        self.head.forward(g, store, xf)
    }

    /// Plain forward pass: logits for every cell.
    pub fn predict_logits(
        &self,
        grid: &TokenGrid,
        text: &TextEmbedding,
    ) -> Result<Tensor, MaskedError> {
        self.check_grid(grid)?;
        self.check_text(text)?;
        let mut g = Graph::new();
        let logits = self.logits_graph(&mut g, &self.params, grid.tokens(), text);
        Ok(g.value(logits).clone())
    }

    /// One masked-training step over (grid, text) pairs.
    ///
    /// Per sample the masked fraction comes from the cosine schedule at
    /// u ~ Uniform(0,1]; `forced_ratio` overrides it (debug hook). Loss is
    /// cross-entropy averaged over masked positions only; zero positions
    /// define a loss of 0 and skip the update.
    pub fn train_step(
        &mut self,
        batch: &[(TokenGrid, TextEmbedding)],
        seed: u64,
        forced_ratio: Option<f64>,
        opt: &mut Adam,
    ) -> Result<f64, MaskedError> {
        assert!(!batch.is_empty(), "empty batch");
        for (grid, text) in batch {
            self.check_grid(grid)?;
            self.check_text(text)?;
            if grid.has_mask() {
                return Err(MaskedError::GridHasMask(grid.mask_count()));
            }
        }
        let mut g = Graph::new();
        let mut nll_sum: Option<NodeId> = None;
        let mut total_masked = 0usize;
        let mut ratio_rng = rng_from_seed(derive_seed(seed, "ratio"));
        for (i, (grid, text)) in batch.iter().enumerate() {
            let ratio = match forced_ratio {
                Some(r) => r,
                None => {
                    let u: f64 = 1.0 - ratio_rng.gen::<f64>();
                    mask_ratio(u)?
                }
            };
            let (masked, positions) =
                apply_mask(grid, ratio, derive_seed(seed, &format!("mask{i}")))?;
            if positions.is_empty() {
                continue;
            }
            let logits = self.logits_graph(&mut g, &self.params, masked.tokens(), text);
            let masked_logits = g.gather_rows(logits, &positions);
            let logp = g.log_softmax_last(masked_logits);
            let targets: Vec<usize> = positions.iter().map(|&p| grid.get(p) as usize).collect();
            let picked = g.pick_per_row(logp, &targets);
            let s = g.sum_all(picked);
            nll_sum = Some(match nll_sum {
                Some(acc) => g.add(acc, s),
                None => s,
            });
            total_masked += positions.len();
        }
        let Some(acc) = nll_sum else {
            return Ok(0.0);
        };
        let loss_node = g.scale(acc, -1.0 / total_masked as f64);
        let loss = g.value(loss_node).item();
        if !loss.is_finite() {
            return Err(MaskedError::NonFiniteLoss(self.step));
        }
        let grads = g.backward(loss_node);
        let by_name = g.param_grads(&grads);
        opt.step(&mut self.params, &by_name);
        self.step += 1;
        Ok(loss)
    }

    /// Argmax accuracy on masked positions at a fixed corruption ratio.
    pub fn masked_accuracy(
        &self,
        batch: &[(TokenGrid, TextEmbedding)],
        ratio: f64,
        seed: u64,
    ) -> Result<f64, MaskedError> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for (i, (grid, text)) in batch.iter().enumerate() {
            let (masked, positions) =
                apply_mask(grid, ratio, derive_seed(seed, &format!("acc{i}")))?;
            let logits = self.predict_logits(&masked, text)?;
            let k = self.cfg.codebook_size;
            for &p in &positions {
                let row = &logits.data()[p * k..(p + 1) * k];
                let pred = argmax(row);
                if pred as u32 == grid.get(p) {
                    correct += 1;
                }
                total += 1;
            }
        }
        Ok(if total == 0 {
            1.0
        } else {
            correct as f64 / total as f64
        })
    }

    /// Text-to-grid generation by iterative parallel decoding.
    pub fn generate(
        &self,
        text: &TextEmbedding,
        opts: &DecodeOptions,
    ) -> Result<TokenGrid, MaskedError> {
        let init = TokenGrid::all_mask(
            self.cfg.grid_height,
            self.cfg.grid_width,
            self.cfg.codebook_size as u32,
        );
        let keep = vec![false; self.cfg.cells()];
        Ok(self.decode_constrained(&init, &keep, text, opts)?.0)
    }

    pub fn generate_traced(
        &self,
        text: &TextEmbedding,
        opts: &DecodeOptions,
    ) -> Result<(TokenGrid, Vec<DecodingState>), MaskedError> {
        let init = TokenGrid::all_mask(
            self.cfg.grid_height,
            self.cfg.grid_width,
            self.cfg.codebook_size as u32,
        );
        let keep = vec![false; self.cfg.cells()];
        self.decode_constrained(&init, &keep, text, opts)
    }

    /// Regenerate the non-kept cells of a grid; kept cells are re-imposed
    /// after every step and come out byte-identical.
    pub fn inpaint(
        &self,
        grid: &TokenGrid,
        keep: &[bool],
        text: &TextEmbedding,
        opts: &DecodeOptions,
    ) -> Result<TokenGrid, MaskedError> {
        self.check_grid(grid)?;
        if keep.len() != grid.len() {
            return Err(MaskedError::KeepMaskLenMismatch {
                expected: grid.len(),
                got: keep.len(),
            });
        }
        for (p, &k) in keep.iter().enumerate() {
            if k && grid.get(p) == grid.mask_sentinel() {
                return Err(MaskedError::KeptCellMasked(p));
            }
        }
        Ok(self.decode_constrained(grid, keep, text, opts)?.0)
    }

    fn decode_constrained(
        &self,
        input: &TokenGrid,
        keep: &[bool],
        text: &TextEmbedding,
        opts: &DecodeOptions,
    ) -> Result<(TokenGrid, Vec<DecodingState>), MaskedError> {
        self.check_text(text)?;
        let s_total = opts.schedule.steps;
        if s_total < 1 {
            return Err(MaskedError::BadSchedule(s_total));
        }
        let n = self.cfg.cells();
        let k = self.cfg.codebook_size;
        let sentinel = self.cfg.codebook_size as u32;
        let mut committed: Vec<bool> = keep.to_vec();
        let mut grid = TokenGrid::all_mask(
            self.cfg.grid_height,
            self.cfg.grid_width,
            sentinel,
        );
        for p in 0..n {
            if keep[p] {
                grid.set(p, input.get(p));
            }
        }
        let mut rng = rng_from_seed(opts.seed);
        let mut trace = Vec::with_capacity(s_total);
        for s in 1..=s_total {
            let tau = if s_total == 1 {
                0.0
            } else {
                opts.temperature * (s_total - s) as f64 / (s_total - 1) as f64
            };
            let mut g = Graph::new();
            let logits_node = self.logits_graph(&mut g, &self.params, grid.tokens(), text);
            let logits = g.value(logits_node);
            // sample a candidate token and confidence for every open cell
            let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
            for p in 0..n {
                if committed[p] {
                    continue;
                }
                let row = &logits.data()[p * k..(p + 1) * k];
                let (token, conf) = sample_token(row, tau, &mut rng);
                candidates.push((p, token, conf));
            }
            // commit the most confident tokens up to the schedule target
            let already: usize = committed.iter().filter(|&&c| c).count();
            let target =
                ((1.0 - mask_ratio(s as f64 / s_total as f64)?) * n as f64).ceil() as usize;
            let to_commit = target.saturating_sub(already).min(candidates.len());
            candidates.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            for &(p, token, _) in candidates.iter().take(to_commit) {
                grid.set(p, token);
                committed[p] = true;
            }
            // the rest stay masked; the keep constraint is re-imposed
            for p in 0..n {
                if keep[p] {
                    grid.set(p, input.get(p));
                    committed[p] = true;
                } else if !committed[p] {
                    grid.set(p, sentinel);
                }
            }
            let confidences = {
                let mut c = vec![0.0; n];
                for &(p, _, conf) in &candidates {
                    c[p] = conf;
                }
                c
            };
            trace.push(DecodingState {
                step: s,
                committed: committed.iter().filter(|&&c| c).count(),
                confidences,
            });
        }
        debug_assert!(!grid.has_mask(), "decode finished with masks left");
        Ok((grid, trace))
    }

    pub fn save(&self, path: &Path) -> Result<(), MaskedError> {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            step: self.step,
        };
        ckpt::save(path, &header, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MaskedError> {
        let (header, params) = ckpt::load(path)?;
        let cfg: MaskedTransformerConfig = serde_json::from_value(header.config)
            .map_err(|e| MaskedError::ConfigMismatch(e.to_string()))?;
        let mut fresh = Self::new(cfg)?;
        for name in fresh.params.names() {
            if !params.contains(name) {
                return Err(MaskedError::ConfigMismatch(format!("missing tensor {name}")));
            }
        }
        fresh.params = params;
        fresh.step = header.step;
        Ok(fresh)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sample a token from temperature-scaled logits; confidence is the model
/// probability (temperature 1) of the chosen token. Temperature 0 is argmax
/// and consumes no randomness.
fn sample_token(logits: &[f64], tau: f64, rng: &mut faceforge_tensor::rng::SeededRng) -> (u32, f64) {
    let probs_t1 = softmax(logits, 1.0);
    if tau <= 0.0 {
        let t = argmax(logits);
        return (t as u32, probs_t1[t]);
    }
    let probs = softmax(logits, tau);
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut chosen = logits.len() - 1;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            chosen = i;
            break;
        }
    }
    (chosen as u32, probs_t1[chosen])
}

fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}
