//! VQ autoencoder: images to discrete token grids and back.
//!
//! A small convolutional encoder maps an image to a latent grid, each cell is
//! snapped to its nearest codebook entry, and a mirrored decoder reconstructs
//! the image. Training uses plain reconstruction MSE plus the two vector-
//! quantization terms, with the straight-through estimator carrying decoder
//! gradients past the discrete snap. Separate checkpoints are trained per
//! image type (face / mask / landmarks).

use std::path::Path;

use serde::{Deserialize, Serialize};

use faceforge_tensor::ckpt::{self, CheckpointHeader, CkptError, FORMAT_VERSION};
use faceforge_tensor::nn::Conv2dLayer;
use faceforge_tensor::optim::Adam;
use faceforge_tensor::rng::rng_from_seed;
use faceforge_tensor::{Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum VqError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("expected {expected}x{expected} image, got {got_h}x{got_w}")]
    WrongImageSize {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("latent dim {got} does not match codebook dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("token grid contains {0} MASK cells; decode needs a complete grid")]
    MaskInDecode(usize),
    #[error("token {token} exceeds vocab {vocab}")]
    TokenOutOfRange { token: u32, vocab: u32 },
    #[error("non-finite loss at step {step}: rec={rec} codebook={cb} commit={commit}")]
    NonFiniteLoss {
        step: u64,
        rec: f64,
        cb: f64,
        commit: f64,
    },
    #[error("checkpoint: {0}")]
    Ckpt(#[from] CkptError),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
}

/// Grid of discrete codebook indices with a MASK sentinel equal to `vocab`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub vocab: u32,
    tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, vocab: u32, tokens: Vec<u32>) -> Result<Self, VqError> {
        if tokens.len() != height * width {
            return Err(VqError::BadConfig(format!(
                "{height}x{width} grid needs {} tokens, got {}",
                height * width,
                tokens.len()
            )));
        }
        for &t in &tokens {
            if t > vocab {
                return Err(VqError::TokenOutOfRange { token: t, vocab });
            }
        }
        Ok(Self {
            height,
            width,
            vocab,
            tokens,
        })
    }

    pub fn all_mask(height: usize, width: usize, vocab: u32) -> Self {
        Self {
            height,
            width,
            vocab,
            tokens: vec![vocab; height * width],
        }
    }

    pub fn mask_sentinel(&self) -> u32 {
        self.vocab
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn get(&self, idx: usize) -> u32 {
        self.tokens[idx]
    }

    pub fn set(&mut self, idx: usize, token: u32) {
        assert!(token <= self.vocab);
        self.tokens[idx] = token;
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        let m = self.mask_sentinel();
        self.tokens.iter().filter(|&&t| t == m).count()
    }

    pub fn has_mask(&self) -> bool {
        self.mask_count() > 0
    }
}

/// Tokenizer hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VqConfig {
    pub image_size: usize,
    pub downsample_factor: usize,
    /// Number of codebook entries (K).
    pub codebook_size: usize,
    /// Codebook embedding dim (D).
    pub embed_dim: usize,
    /// Encoder channel width per downsampling stage.
    pub channels: Vec<usize>,
    /// Commitment weight (beta).
    pub commitment_weight: f64,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            downsample_factor: 4,
            codebook_size: 64,
            embed_dim: 32,
            channels: vec![16, 32],
            commitment_weight: 0.25,
            seed: 0,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<(), VqError> {
        if self.codebook_size == 0 {
            return Err(VqError::EmptyCodebook);
        }
        if self.downsample_factor == 0 || self.image_size % self.downsample_factor != 0 {
            return Err(VqError::BadConfig(format!(
                "image_size {} not divisible by factor {}",
                self.image_size, self.downsample_factor
            )));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(VqError::BadConfig("factor must be a power of two".into()));
        }
        let stages = self.downsample_factor.trailing_zeros() as usize;
        if self.channels.len() != stages {
            return Err(VqError::BadConfig(format!(
                "factor {} needs {} channel widths, got {}",
                self.downsample_factor,
                stages,
                self.channels.len()
            )));
        }
        if self.commitment_weight < 0.0 {
            return Err(VqError::BadConfig("commitment weight must be >= 0".into()));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.downsample_factor
    }
}

struct VqLayers {
    enc_in: Conv2dLayer,
    enc_down: Vec<Conv2dLayer>,
    enc_head: Conv2dLayer,
    dec_in: Conv2dLayer,
    dec_up: Vec<Conv2dLayer>,
    dec_out: Conv2dLayer,
}

pub const CODEBOOK_PARAM: &str = "vq.codebook";

/// The tokenizer model: convolutional encoder/decoder plus codebook.
pub struct VqModel {
    pub cfg: VqConfig,
    pub params: ParamStore,
    pub step: u64,
    layers: VqLayers,
}

impl VqModel {
    pub fn new(cfg: VqConfig) -> Result<Self, VqError> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_from_seed(cfg.seed);
        let layers = build_layers(&cfg, &mut params, &mut rng);
        params.insert(
            CODEBOOK_PARAM,
            faceforge_tensor::nn::normal_init(
                &mut rng,
                &[cfg.codebook_size, cfg.embed_dim],
                1.0 / cfg.embed_dim as f64,
            ),
        );
        Ok(Self {
            cfg,
            params,
            step: 0,
            layers,
        })
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(CODEBOOK_PARAM)
    }

    fn check_image(&self, image: &Tensor) -> Result<(), VqError> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || s[1] != self.cfg.image_size || s[2] != self.cfg.image_size {
            return Err(VqError::WrongImageSize {
                expected: self.cfg.image_size,
                got_h: s.get(1).copied().unwrap_or(0),
                got_w: s.get(2).copied().unwrap_or(0),
            });
        }
        Ok(())
    }

    fn encoder_graph(&self, g: &mut Graph, store: &ParamStore, x: NodeId, frozen: bool) -> NodeId {
        let fwd = |g: &mut Graph, layer: &Conv2dLayer, x: NodeId| -> NodeId {
            let w = if frozen {
                g.frozen_param(store, &layer.w)
            } else {
                g.param(store, &layer.w)
            };
            let b = if frozen {
                g.frozen_param(store, &layer.b)
            } else {
                g.param(store, &layer.b)
            };
            let y = g.conv2d(x, w, layer.stride, layer.pad);
            g.add_channel_bias(y, b)
        };
        let mut h = fwd(g, &self.layers.enc_in, x);
        h = g.silu(h);
        for conv in &self.layers.enc_down {
            h = fwd(g, conv, h);
            h = g.silu(h);
        }
        fwd(g, &self.layers.enc_head, h)
    }

    fn decoder_graph(&self, g: &mut Graph, store: &ParamStore, z: NodeId, frozen: bool) -> NodeId {
        let fwd = |g: &mut Graph, layer: &Conv2dLayer, x: NodeId| -> NodeId {
            let w = if frozen {
                g.frozen_param(store, &layer.w)
            } else {
                g.param(store, &layer.w)
            };
            let b = if frozen {
                g.frozen_param(store, &layer.b)
            } else {
                g.param(store, &layer.b)
            };
            let y = g.conv2d(x, w, layer.stride, layer.pad);
            g.add_channel_bias(y, b)
        };
        let mut h = fwd(g, &self.layers.dec_in, z);
        h = g.silu(h);
        for conv in &self.layers.dec_up {
            h = g.upsample_nearest(h, 2);
            h = fwd(g, conv, h);
            h = g.silu(h);
        }
        fwd(g, &self.layers.dec_out, h)
    }

    /// Encode an image (`[3,S,S]`, unit range) into an `[h,w,D]` latent grid.
    pub fn encode(&self, image: &Tensor) -> Result<Tensor, VqError> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let z = self.encoder_graph(&mut g, &self.params, x, true);
        Ok(latent_chw_to_hwd(g.value(z)))
    }

    /// Quantize a latent grid against this model's codebook.
    pub fn quantize(&self, latents: &Tensor) -> Result<(TokenGrid, Tensor), VqError> {
        quantize(latents, self.codebook())
    }

    /// Encode + quantize in one call.
    pub fn tokenize(&self, image: &Tensor) -> Result<TokenGrid, VqError> {
        let (grid, _) = self.quantize(&self.encode(image)?)?;
        Ok(grid)
    }

    /// Decode a complete token grid to an image tensor (`[3,S,S]`).
    pub fn decode_tokens(&self, grid: &TokenGrid) -> Result<Tensor, VqError> {
        let masks = grid.mask_count();
        if masks > 0 {
            return Err(VqError::MaskInDecode(masks));
        }
        let cb = self.codebook();
        if grid.vocab as usize != cb.shape()[0] {
            return Err(VqError::TokenOutOfRange {
                token: grid.vocab,
                vocab: cb.shape()[0] as u32,
            });
        }
        let d = cb.shape()[1];
        let mut data = Vec::with_capacity(grid.len() * d);
        for &t in grid.tokens() {
            data.extend_from_slice(&cb.data()[t as usize * d..(t as usize + 1) * d]);
        }
        let latents = Tensor::new(&[grid.height, grid.width, d], data);
        self.decode_latents(&latents)
    }

    /// Decode an `[h,w,D]` latent grid to an image tensor.
    pub fn decode_latents(&self, latents: &Tensor) -> Result<Tensor, VqError> {
        let s = latents.shape();
        let gs = self.cfg.grid_size();
        if s.len() != 3 || s[0] != gs || s[1] != gs || s[2] != self.cfg.embed_dim {
            return Err(VqError::DimMismatch {
                expected: self.cfg.embed_dim,
                got: *s.last().unwrap_or(&0),
            });
        }
        let mut g = Graph::new();
        let z = g.constant(latent_hwd_to_chw(latents));
        let y = self.decoder_graph(&mut g, &self.params, z, true);
        Ok(g.value(y).clone())
    }

    /// Build the full VQ training loss for one image.
    ///
    /// Returns node ids (total, reconstruction, codebook, commitment).
    fn loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<(NodeId, NodeId, NodeId, NodeId), VqError> {
        let x = g.constant(image.clone());
        let z_e = self.encoder_graph(g, store, x, false);
        // tokens are chosen outside the graph from current values
        let z_e_hwd = latent_chw_to_hwd(g.value(z_e));
        let (grid, _) = quantize(&z_e_hwd, store.get(CODEBOOK_PARAM))?;
        let idx: Vec<usize> = grid.tokens().iter().map(|&t| t as usize).collect();

        let gs = self.cfg.grid_size();
        let d = self.cfg.embed_dim;
        // [D,h,w] -> rows [h*w, D]
        let z_flat = g.reshape(z_e, &[d, gs * gs]);
        let z_rows = g.transpose2(z_flat);
        let cb = g.param(store, CODEBOOK_PARAM);
        let q_rows = g.gather_rows(cb, &idx);

        // straight-through: decoder input is bitwise q but the gradient path
        // is the identity into z (sg(q) + (z - sg(z)) evaluates to exactly q)
        let q_stop = g.detach(q_rows);
        let z_stop = g.detach(z_rows);
        let z_delta = g.sub(z_rows, z_stop);
        let st_rows = g.add(q_stop, z_delta);
        let st_flat = g.transpose2(st_rows);
        let st = g.reshape(st_flat, &[d, gs, gs]);

        let recon = self.decoder_graph(g, store, st, false);
        let rec_loss = g.mse(recon, x);
        // ||sg(z_e) - e||^2 moves the codebook
        let z_sg = g.detach(z_rows);
        let cb_loss = g.mse(q_rows, z_sg);
        // beta * ||z_e - sg(e)||^2 commits the encoder
        let q_sg = g.detach(q_rows);
        let commit_raw = g.mse(z_rows, q_sg);
        let commit = g.scale(commit_raw, self.cfg.commitment_weight);
        let partial = g.add(rec_loss, cb_loss);
        let total = g.add(partial, commit);
        Ok((total, rec_loss, cb_loss, commit_raw))
    }

    /// Total training loss and parameter gradients for a batch, without
    /// taking an optimizer step. Deterministic in the inputs, so it supports
    /// finite-difference probes.
    pub fn loss_and_grads(
        &self,
        batch: &[Tensor],
    ) -> Result<(f64, std::collections::BTreeMap<String, Tensor>), VqError> {
        assert!(!batch.is_empty(), "empty batch");
        for img in batch {
            self.check_image(img)?;
        }
        let mut g = Graph::new();
        let mut totals = Vec::new();
        for img in batch {
            let (total, _, _, _) = self.loss_graph(&mut g, &self.params, img)?;
            totals.push(total);
        }
        let mut acc = totals[0];
        for &t in &totals[1..] {
            acc = g.add(acc, t);
        }
        let mean = g.scale(acc, 1.0 / batch.len() as f64);
        let grads = g.backward(mean);
        Ok((g.value(mean).item(), g.param_grads(&grads)))
    }

    /// One optimizer step over a batch of images. Aborts on non-finite loss.
    pub fn train_step(&mut self, batch: &[Tensor], opt: &mut Adam) -> Result<VqLosses, VqError> {
        assert!(!batch.is_empty(), "empty batch");
        for img in batch {
            self.check_image(img)?;
        }
        let mut g = Graph::new();
        let mut totals = Vec::new();
        let mut losses = VqLosses::default();
        for img in batch {
            let (total, rec, cb, commit) = self.loss_graph(&mut g, &self.params, img)?;
            losses.reconstruction += g.value(rec).item() / batch.len() as f64;
            losses.codebook += g.value(cb).item() / batch.len() as f64;
            losses.commitment += g.value(commit).item() / batch.len() as f64;
            totals.push(total);
        }
        let mut acc = totals[0];
        for &t in &totals[1..] {
            acc = g.add(acc, t);
        }
        let mean = g.scale(acc, 1.0 / batch.len() as f64);
        losses.total = g.value(mean).item();
        if !losses.total.is_finite() {
            return Err(VqError::NonFiniteLoss {
                step: self.step,
                rec: losses.reconstruction,
                cb: losses.codebook,
                commit: losses.commitment,
            });
        }
        let grads = g.backward(mean);
        let by_name = g.param_grads(&grads);
        opt.step(&mut self.params, &by_name);
        self.step += 1;
        Ok(losses)
    }

    pub fn save(&self, path: &Path) -> Result<(), VqError> {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: serde_json::to_value(&self.cfg).expect("config serializes"),
            step: self.step,
        };
        ckpt::save(path, &header, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VqError> {
        let (header, params) = ckpt::load(path)?;
        let cfg: VqConfig = serde_json::from_value(header.config)
            .map_err(|e| VqError::ConfigMismatch(e.to_string()))?;
        cfg.validate()?;
        let mut expected = ParamStore::new();
        let mut rng = rng_from_seed(cfg.seed);
        let layers = build_layers(&cfg, &mut expected, &mut rng);
        for name in expected.names() {
            if !params.contains(name) {
                return Err(VqError::ConfigMismatch(format!("missing tensor {name}")));
            }
        }
        if !params.contains(CODEBOOK_PARAM) {
            return Err(VqError::ConfigMismatch("missing codebook".into()));
        }
        Ok(Self {
            cfg,
            params,
            step: header.step,
            layers,
        })
    }
}

/// Snap each latent cell to its nearest codebook entry.
///
/// Distances are exact squared-Euclidean scans in index order with strict
/// improvement, so ties resolve to the lowest index.
pub fn quantize(latents: &Tensor, codebook: &Tensor) -> Result<(TokenGrid, Tensor), VqError> {
    let cs = codebook.shape();
    if cs.is_empty() || cs[0] == 0 {
        return Err(VqError::EmptyCodebook);
    }
    let (k, d) = (cs[0], cs[1]);
    let ls = latents.shape();
    if ls.len() != 3 || ls[2] != d {
        return Err(VqError::DimMismatch {
            expected: d,
            got: *ls.last().unwrap_or(&0),
        });
    }
    let (h, w) = (ls[0], ls[1]);
    let mut tokens = Vec::with_capacity(h * w);
    let mut quantized = Vec::with_capacity(h * w * d);
    for cell in 0..h * w {
        let v = &latents.data()[cell * d..(cell + 1) * d];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for j in 0..k {
            let e = &codebook.data()[j * d..(j + 1) * d];
            let mut dist = 0.0;
            for i in 0..d {
                let diff = v[i] - e[i];
                dist += diff * diff;
            }
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        tokens.push(best as u32);
        quantized.extend_from_slice(&codebook.data()[best * d..(best + 1) * d]);
    }
    let grid = TokenGrid::new(h, w, k as u32, tokens)?;
    Ok((grid, Tensor::new(&[h, w, d], quantized)))
}

fn build_layers(
    cfg: &VqConfig,
    params: &mut ParamStore,
    rng: &mut faceforge_tensor::rng::SeededRng,
) -> VqLayers {
    let ch = &cfg.channels;
    let enc_in = Conv2dLayer::init(params, rng, "vq.enc.in", 3, ch[0], 3, 1, 1);
    let mut enc_down = Vec::new();
    for (i, &c) in ch.iter().enumerate() {
        let cin = if i == 0 { ch[0] } else { ch[i - 1] };
        enc_down.push(Conv2dLayer::init(
            params,
            rng,
            &format!("vq.enc.down{i}"),
            cin,
            c,
            3,
            2,
            1,
        ));
    }
    let enc_head = Conv2dLayer::init(
        params,
        rng,
        "vq.enc.head",
        *ch.last().unwrap(),
        cfg.embed_dim,
        1,
        1,
        0,
    );
    let dec_in = Conv2dLayer::init(
        params,
        rng,
        "vq.dec.in",
        cfg.embed_dim,
        *ch.last().unwrap(),
        1,
        1,
        0,
    );
    let mut dec_up = Vec::new();
    for i in (0..ch.len()).rev() {
        let cin = ch[i];
        let cout = if i == 0 { ch[0] } else { ch[i - 1] };
        dec_up.push(Conv2dLayer::init(
            params,
            rng,
            &format!("vq.dec.up{i}"),
            cin,
            cout,
            3,
            1,
            1,
        ));
    }
    let dec_out = Conv2dLayer::init(params, rng, "vq.dec.out", ch[0], 3, 3, 1, 1);
    VqLayers {
        enc_in,
        enc_down,
        enc_head,
        dec_in,
        dec_up,
        dec_out,
    }
}

/// `[D,h,w]` -> `[h,w,D]`
fn latent_chw_to_hwd(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let mut data = vec![0.0; t.numel()];
    for c in 0..d {
        for y in 0..h {
            for x in 0..w {
                data[(y * w + x) * d + c] = t.data()[(c * h + y) * w + x];
            }
        }
    }
    Tensor::new(&[h, w, d], data)
}

/// `[h,w,D]` -> `[D,h,w]`
fn latent_hwd_to_chw(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (h, w, d) = (s[0], s[1], s[2]);
    let mut data = vec![0.0; t.numel()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                data[(c * h + y) * w + x] = t.data()[(y * w + x) * d + c];
            }
        }
    }
    Tensor::new(&[d, h, w], data)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VqLosses {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use faceforge_tensor::nn::normal_init;

    fn tiny_cfg() -> VqConfig {
        VqConfig {
            image_size: 8,
            downsample_factor: 2,
            codebook_size: 8,
            embed_dim: 4,
            channels: vec![6],
            commitment_weight: 0.25,
            seed: 7,
        }
    }

    #[test]
    fn zero_image_encodes_finite() {
        let model = VqModel::new(tiny_cfg()).unwrap();
        let z = model.encode(&Tensor::zeros(&[3, 8, 8])).unwrap();
        assert_eq!(z.shape(), &[4, 4, 4]);
        assert!(z.is_finite());
    }

    #[test]
    fn encode_is_deterministic() {
        let model = VqModel::new(tiny_cfg()).unwrap();
        let mut rng = rng_from_seed(1);
        let img = normal_init(&mut rng, &[3, 8, 8], 0.3).map(|v| v.abs().min(1.0));
        let a = model.encode(&img).unwrap();
        let b = model.encode(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn latent_shape_follows_factor() {
        let cfg = VqConfig::default();
        let model = VqModel::new(cfg).unwrap();
        let z = model.encode(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert_eq!(z.shape(), &[8, 8, 32]);
    }

    #[test]
    fn wrong_size_is_rejected() {
        let model = VqModel::new(tiny_cfg()).unwrap();
        assert!(matches!(
            model.encode(&Tensor::zeros(&[3, 16, 16])),
            Err(VqError::WrongImageSize { .. })
        ));
    }

    #[test]
    fn single_entry_codebook_maps_everything_to_zero() {
        let mut rng = rng_from_seed(2);
        let latents = normal_init(&mut rng, &[3, 3, 4], 1.0);
        let cb = normal_init(&mut rng, &[1, 4], 1.0);
        let (grid, q) = quantize(&latents, &cb).unwrap();
        assert!(grid.tokens().iter().all(|&t| t == 0));
        for cell in 0..9 {
            assert_eq!(&q.data()[cell * 4..(cell + 1) * 4], cb.data());
        }
    }

    #[test]
    fn exact_entry_match_has_zero_residual() {
        let mut rng = rng_from_seed(3);
        let cb = normal_init(&mut rng, &[8, 4], 1.0);
        let j = 5usize;
        let latents = Tensor::new(&[1, 1, 4], cb.data()[j * 4..(j + 1) * 4].to_vec());
        let (grid, q) = quantize(&latents, &cb).unwrap();
        assert_eq!(grid.tokens(), &[j as u32]);
        assert_eq!(q.data(), latents.data());
    }

    #[test]
    fn quantize_matches_brute_force_oracle() {
        let mut rng = rng_from_seed(4);
        let latents = normal_init(&mut rng, &[10, 10, 8], 1.0);
        let cb = normal_init(&mut rng, &[16, 8], 1.0);
        let (grid, _) = quantize(&latents, &cb).unwrap();
        for cell in 0..100 {
            let v = &latents.data()[cell * 8..(cell + 1) * 8];
            let mut best = 0u32;
            let mut best_d = f64::INFINITY;
            for j in 0..16 {
                let e = &cb.data()[j * 8..(j + 1) * 8];
                let d: f64 = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = j as u32;
                }
            }
            assert_eq!(grid.get(cell), best);
        }
    }

    #[test]
    fn empty_codebook_is_rejected() {
        let latents = Tensor::zeros(&[2, 2, 4]);
        let cb = Tensor::zeros(&[0, 4]);
        assert!(matches!(
            quantize(&latents, &cb),
            Err(VqError::EmptyCodebook)
        ));
    }

    #[test]
    fn decode_rejects_mask() {
        let model = VqModel::new(tiny_cfg()).unwrap();
        let mut grid = TokenGrid::all_mask(4, 4, 8);
        grid.set(0, 3);
        match model.decode_tokens(&grid) {
            Err(VqError::MaskInDecode(n)) => assert_eq!(n, 15),
            other => panic!("expected MaskInDecode, got {other:?}"),
        }
    }

    #[test]
    fn decode_shape_and_determinism() {
        let model = VqModel::new(tiny_cfg()).unwrap();
        let grid = TokenGrid::new(4, 4, 8, (0..16).map(|i| i % 8).collect()).unwrap();
        let a = model.decode_tokens(&grid).unwrap();
        let b = model.decode_tokens(&grid).unwrap();
        assert_eq!(a.shape(), &[3, 8, 8]);
        assert_eq!(a, b);
    }

    #[test]
    fn tokenize_roundtrip_shapes() {
        let model = VqModel::new(tiny_cfg()).unwrap();
        let mut rng = rng_from_seed(5);
        let img = normal_init(&mut rng, &[3, 8, 8], 0.2).map(|v| v.clamp(0.0, 1.0));
        let grid = model.tokenize(&img).unwrap();
        assert_eq!((grid.height, grid.width), (4, 4));
        assert!(!grid.has_mask());
        let back = model.decode_tokens(&grid).unwrap();
        assert_eq!(back.shape(), img.shape());
    }

    #[test]
    fn training_reduces_loss_and_counts_steps() {
        let mut model = VqModel::new(tiny_cfg()).unwrap();
        let mut rng = rng_from_seed(6);
        let batch: Vec<Tensor> = (0..4)
            .map(|_| normal_init(&mut rng, &[3, 8, 8], 0.2).map(|v| (v + 0.5).clamp(0.0, 1.0)))
            .collect();
        let mut opt = Adam::new(3e-3);
        let first = model.train_step(&batch, &mut opt).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = model.train_step(&batch, &mut opt).unwrap();
        }
        assert!(last.total < first.total, "{} !< {}", last.total, first.total);
        assert_eq!(model.step, 61);
    }

    #[test]
    fn beta_zero_total_is_rec_plus_codebook() {
        let mut cfg = tiny_cfg();
        cfg.commitment_weight = 0.0;
        let mut model = VqModel::new(cfg).unwrap();
        let img = Tensor::full(&[3, 8, 8], 0.5);
        let mut opt = Adam::new(0.0);
        let losses = model.train_step(&[img], &mut opt).unwrap();
        let sum = losses.reconstruction + losses.codebook;
        assert!((losses.total - sum).abs() < 1e-12);
    }

    #[test]
    fn straight_through_copies_decoder_gradient_to_encoder_output() {
        // grad wrt z_e from the reconstruction path must equal the grad wrt
        // z_q when z_q is treated as the leaf.
        let model = VqModel::new(tiny_cfg()).unwrap();
        let mut rng = rng_from_seed(8);
        let img = normal_init(&mut rng, &[3, 8, 8], 0.3);
        let z = model.encode(&img).unwrap();
        let (_, q) = model.quantize(&z).unwrap();

        // route A: z_e var, straight-through to decoder
        let mut ga = Graph::new();
        let z_var = ga.var(latent_hwd_to_chw(&z));
        let d = model.cfg.embed_dim;
        let gs = model.cfg.grid_size();
        let z_flat = ga.reshape(z_var, &[d, gs * gs]);
        let z_rows = ga.transpose2(z_flat);
        let q_rows = ga.constant({
            let chw = latent_hwd_to_chw(&q);
            let flat = chw.reshaped(&[d, gs * gs]);
            // transpose to rows
            let mut data = vec![0.0; flat.numel()];
            for r in 0..d {
                for c in 0..gs * gs {
                    data[c * d + r] = flat.data()[r * (gs * gs) + c];
                }
            }
            Tensor::new(&[gs * gs, d], data)
        });
        let z_stop = ga.detach(z_rows);
        let z_delta = ga.sub(z_rows, z_stop);
        let st_rows = ga.add(q_rows, z_delta);
        let st_flat = ga.transpose2(st_rows);
        let st = ga.reshape(st_flat, &[d, gs, gs]);
        let target = ga.constant(img.clone());
        let recon = model.decoder_graph(&mut ga, &model.params, st, true);
        let loss = ga.mse(recon, target);
        let grads_a = ga.backward(loss);
        let dz = grads_a.get(z_var).unwrap().clone();

        // route B: z_q as the decoder input leaf
        let mut gb = Graph::new();
        let q_var = gb.var(latent_hwd_to_chw(&q));
        let target_b = gb.constant(img);
        let recon_b = model.decoder_graph(&mut gb, &model.params, q_var, true);
        let loss_b = gb.mse(recon_b, target_b);
        let grads_b = gb.backward(loss_b);
        let dq = grads_b.get(q_var).unwrap().clone();

        assert_eq!(dz, dq, "straight-through gradient mismatch");
    }

    #[test]
    fn checkpoint_roundtrip_restores_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vq.ckpt");
        let mut model = VqModel::new(tiny_cfg()).unwrap();
        let mut opt = Adam::new(1e-3);
        let img = Tensor::full(&[3, 8, 8], 0.3);
        model.train_step(std::slice::from_ref(&img), &mut opt).unwrap();
        model.save(&path).unwrap();
        let loaded = VqModel::load(&path).unwrap();
        assert_eq!(loaded.step, 1);
        assert_eq!(loaded.cfg, model.cfg);
        assert!(model.params.diff_names(&loaded.params).is_empty());
        assert_eq!(
            loaded.encode(&img).unwrap(),
            model.encode(&img).unwrap()
        );
    }
}
