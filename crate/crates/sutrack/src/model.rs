//! Full model assembly: tokenizer, sequence layout, encoder, and heads.
//!
//! A forward pass consumes two template crops and one search crop of the
//! same task, tokenizes each through the patch embedder, adds positional and
//! token-type embeddings, fuses the text embedding, runs the shared encoder,
//! and reads the tracking maps and task logits off the output tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{
    box_mask, concat_channels, hard_round, im2col6, init_from_rgb_weights, sequence_spans,
    soft_mask_avg, text_stub_vector, EmbedError, EmbedMode, FusionMode, InitMode, ModalFrame,
    SpanSet, TokenTypeMode,
};
use crate::encoder::{
    affine, encode, register_affine, register_encoder, AffineParams, EncoderConfig, EncoderError,
    EncoderParams,
};
use crate::heads::{
    pool_tokens, register_task_head, register_track_head, task_logits, track_head, HeadError,
    HeadOutput, PoolingMode, TaskHeadParams, TrackHeadParams,
};
use crate::optim::{ParamGroup, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::tracker::{TemplateCrop, TrackMaps};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("resolution {side} is not divisible by patch size {patch}")]
    BadResolution { side: usize, patch: usize },
    #[error("width {dim} is not divisible by {heads} attention heads")]
    BadHeadCount { dim: usize, heads: usize },
    #[error("template and search frames belong to different tasks")]
    TaskMismatch,
    #[error("expected a {expected}px square crop, got {h}x{w}")]
    BadCrop { expected: usize, h: usize, w: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub template_res: usize,
    pub search_res: usize,
    pub token_type: TokenTypeMode,
    pub fusion: FusionMode,
    pub embed: EmbedMode,
    pub pooling: PoolingMode,
    pub init: InitMode,
    pub task_head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 16,
            dim: 64,
            depth: 2,
            heads: 2,
            mlp_ratio: 4.0,
            template_res: 32,
            search_res: 64,
            token_type: TokenTypeMode::Soft,
            fusion: FusionMode::Concat,
            embed: EmbedMode::Unified,
            pooling: PoolingMode::MeanPool,
            init: InitMode::HalfCopy,
            task_head_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn tokens_per_template(&self) -> usize {
        let side = self.template_res / self.patch_size;
        side * side
    }

    pub fn search_tokens(&self) -> usize {
        let g = self.search_grid();
        g * g
    }

    pub fn search_grid(&self) -> usize {
        self.search_res / self.patch_size
    }

    pub fn spans(&self) -> SpanSet {
        sequence_spans(
            self.tokens_per_template(),
            self.search_tokens(),
            2,
            self.fusion == FusionMode::Concat,
            self.pooling == PoolingMode::ExtraTaskToken,
        )
    }

    fn validate(&self) -> Result<(), ModelError> {
        for side in [self.template_res, self.search_res] {
            if side == 0 || side % self.patch_size != 0 {
                return Err(ModelError::BadResolution {
                    side,
                    patch: self.patch_size,
                });
            }
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::BadHeadCount {
                dim: self.dim,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum PatchParams {
    /// One linear over all six channels.
    Unified(AffineParams),
    /// Modality-specific linears whose projections are summed.
    Separate { rgb: AffineParams, aux: AffineParams },
}

pub struct Model {
    cfg: ModelConfig,
    pub params: ParamSet,
    patch: PatchParams,
    pos_template: ParamId,
    pos_search: ParamId,
    type_fg: Option<ParamId>,
    type_bg: Option<ParamId>,
    type_search: Option<ParamId>,
    text_proj: AffineParams,
    task_token: Option<ParamId>,
    encoder: EncoderParams,
    enc_cfg: EncoderConfig,
    track: TrackHeadParams,
    task_head: TaskHeadParams,
}

const INIT_LIMIT: f64 = 0.02;

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = cfg.dim;
        let p2 = cfg.patch_size * cfg.patch_size;

        let patch = match cfg.embed {
            EmbedMode::Unified => {
                let a = register_affine(
                    &mut ps,
                    ParamGroup::Encoder,
                    "embed.patch",
                    d,
                    6 * p2,
                    INIT_LIMIT,
                    &mut rng,
                );
                // Expand a three-channel weight to six channels per the
                // configured copy scheme.
                let w3 = Tensor::rand_uniform(&[d, 3 * p2], INIT_LIMIT, &mut rng);
                ps.set_value(a.w, init_from_rgb_weights(&w3, cfg.init, &mut rng));
                PatchParams::Unified(a)
            }
            EmbedMode::Separate => PatchParams::Separate {
                rgb: register_affine(
                    &mut ps,
                    ParamGroup::Encoder,
                    "embed.rgb",
                    d,
                    3 * p2,
                    INIT_LIMIT,
                    &mut rng,
                ),
                aux: register_affine(
                    &mut ps,
                    ParamGroup::Encoder,
                    "embed.aux",
                    d,
                    3 * p2,
                    INIT_LIMIT,
                    &mut rng,
                ),
            },
        };

        let pos_template = ps.register(
            "embed.pos.template",
            ParamGroup::Encoder,
            Tensor::rand_uniform(&[cfg.tokens_per_template(), d], INIT_LIMIT, &mut rng),
        );
        let pos_search = ps.register(
            "embed.pos.search",
            ParamGroup::Encoder,
            Tensor::rand_uniform(&[cfg.search_tokens(), d], INIT_LIMIT, &mut rng),
        );

        let type_vec = |ps: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng| {
            ps.register(
                name,
                ParamGroup::Other,
                Tensor::rand_uniform(&[1, d], INIT_LIMIT, rng),
            )
        };
        let typed = cfg.token_type != TokenTypeMode::None;
        let type_fg = typed.then(|| type_vec(&mut ps, "embed.type.fg", &mut rng));
        let type_bg = typed.then(|| type_vec(&mut ps, "embed.type.bg", &mut rng));
        let type_search = typed.then(|| type_vec(&mut ps, "embed.type.search", &mut rng));

        let text_proj = register_affine(
            &mut ps,
            ParamGroup::Other,
            "embed.text",
            d,
            d,
            INIT_LIMIT,
            &mut rng,
        );
        let task_token = (cfg.pooling == PoolingMode::ExtraTaskToken).then(|| {
            ps.register(
                "embed.task_token",
                ParamGroup::Other,
                Tensor::rand_uniform(&[1, d], INIT_LIMIT, &mut rng),
            )
        });

        let enc_cfg = EncoderConfig {
            depth: cfg.depth,
            dim: d,
            heads: cfg.heads,
            mlp_ratio: cfg.mlp_ratio,
        };
        let encoder = register_encoder(&mut ps, &enc_cfg, "encoder", &mut rng);
        let enc_cfg_kept = enc_cfg;
        let track = register_track_head(&mut ps, "head.track", d, &mut rng);
        let task_head = register_task_head(&mut ps, "head.task", d, cfg.task_head_hidden, &mut rng);

        Ok(Model {
            cfg,
            params: ps,
            patch,
            pos_template,
            pos_search,
            type_fg,
            type_bg,
            type_search,
            text_proj,
            task_token,
            encoder,
            enc_cfg: enc_cfg_kept,
            track,
            task_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_crop(&self, frame: &ModalFrame, expected: usize) -> Result<(), ModelError> {
        if frame.height() != expected || frame.width() != expected {
            return Err(ModelError::BadCrop {
                expected,
                h: frame.height(),
                w: frame.width(),
            });
        }
        Ok(())
    }

    /// Patch tokens for one crop: N×D, before positional or type embeddings.
    fn embed_image<'t>(&self, tape: &'t Tape, frame: &ModalFrame) -> Result<Var<'t>, ModelError> {
        let cols = im2col6(&concat_channels(frame), self.cfg.patch_size)?;
        let x = tape.constant(cols);
        Ok(match &self.patch {
            PatchParams::Unified(a) => affine(tape, &self.params, x, a),
            PatchParams::Separate { rgb, aux } => {
                let half = x.shape()[1] / 2;
                let xr = x.narrow(1, 0, half);
                let xa = x.narrow(1, half, half);
                affine(tape, &self.params, xr, rgb).add(affine(tape, &self.params, xa, aux))
            }
        })
    }

    fn add_type<'t>(
        &self,
        tape: &'t Tape,
        tokens: Var<'t>,
        m_avg: Option<&[f64]>,
    ) -> Result<Var<'t>, ModelError> {
        if self.cfg.token_type == TokenTypeMode::None {
            return Ok(tokens);
        }
        let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
        let (fg_id, bg_id, search_id) = (
            self.type_fg.expect("typed mode registers fg"),
            self.type_bg.expect("typed mode registers bg"),
            self.type_search.expect("typed mode registers search"),
        );
        match m_avg {
            None => {
                let e = self.params.leaf(tape, search_id).broadcast_to(&[n, d]);
                Ok(tokens.add(e))
            }
            Some(ms) => {
                if ms.len() != n {
                    return Err(ModelError::Embed(EmbedError::MaskCountMismatch {
                        tokens: n,
                        masks: ms.len(),
                    }));
                }
                let rounded: Vec<f64> = match self.cfg.token_type {
                    TokenTypeMode::Hard => ms.iter().map(|&m| hard_round(m)).collect(),
                    _ => ms.to_vec(),
                };
                let inv: Vec<f64> = rounded.iter().map(|&m| 1.0 - m).collect();
                let m = tape
                    .constant(Tensor::new(vec![n, 1], rounded))
                    .broadcast_to(&[n, d]);
                let w = tape
                    .constant(Tensor::new(vec![n, 1], inv))
                    .broadcast_to(&[n, d]);
                let fg = self.params.leaf(tape, fg_id).broadcast_to(&[n, d]);
                let bg = self.params.leaf(tape, bg_id).broadcast_to(&[n, d]);
                Ok(tokens.add(m.mul(fg)).add(w.mul(bg)))
            }
        }
    }

    fn template_tokens<'t>(
        &self,
        tape: &'t Tape,
        tpl: &TemplateCrop,
    ) -> Result<Var<'t>, ModelError> {
        self.check_crop(&tpl.frame, self.cfg.template_res)?;
        let tokens = self
            .embed_image(tape, &tpl.frame)?
            .add(self.params.leaf(tape, self.pos_template));
        let mask = box_mask(&tpl.bx, self.cfg.template_res, self.cfg.template_res);
        let m_avg = soft_mask_avg(&mask, self.cfg.patch_size)?;
        self.add_type(tape, tokens, Some(&m_avg))
    }

    /// Assembles the token sequence, encodes it, and reads both heads.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        templates: [&TemplateCrop; 2],
        search: &ModalFrame,
    ) -> Result<TrainOutput<'t>, ModelError> {
        if templates.iter().any(|t| t.frame.task != search.task) {
            return Err(ModelError::TaskMismatch);
        }
        self.check_crop(search, self.cfg.search_res)?;

        let st = self.template_tokens(tape, templates[0])?;
        let dt = self.template_tokens(tape, templates[1])?;
        let se = {
            let tokens = self
                .embed_image(tape, search)?
                .add(self.params.leaf(tape, self.pos_search));
            self.add_type(tape, tokens, None)?
        };

        let mut seq = tape.concat(0, &[st, dt, se]);
        let text = tape.constant(text_stub_vector(search.text_source(), self.cfg.dim));
        let text = affine(tape, &self.params, text, &self.text_proj);
        match self.cfg.fusion {
            FusionMode::Concat => {
                seq = tape.concat(0, &[seq, text]);
            }
            FusionMode::Add => {
                let n = seq.shape()[0];
                seq = seq.add(text.broadcast_to(&[n, self.cfg.dim]));
            }
            FusionMode::Mul => {
                let n = seq.shape()[0];
                seq = seq.mul(text.broadcast_to(&[n, self.cfg.dim]));
            }
        }
        if let Some(id) = self.task_token {
            let t = self.params.leaf(tape, id);
            seq = tape.concat(0, &[seq, t]);
        }

        let spans = self.cfg.spans();
        debug_assert_eq!(spans.total, seq.shape()[0]);

        let out = encode(tape, &self.params, seq, &self.encoder, &self.enc_cfg)?;
        let search_out = out.narrow(0, spans.search.start, spans.search.len());
        let head = track_head(tape, &self.params, search_out, &self.track)?;
        let pooled = pool_tokens(out, &spans, self.cfg.pooling)?;
        let logits = task_logits(tape, &self.params, pooled, &self.task_head);
        Ok(TrainOutput { head, logits, spans })
    }

    /// Value-level forward for inference: score, offset, and size maps plus
    /// the raw task logits.
    pub fn forward_maps(
        &self,
        templates: [&TemplateCrop; 2],
        search: &ModalFrame,
    ) -> Result<(TrackMaps, Vec<f64>), ModelError> {
        let tape = Tape::new();
        let out = self.forward(&tape, templates, search)?;
        let maps = TrackMaps {
            score: out.head.score.value(),
            offset: out.head.offset.value(),
            size: out.head.size.value(),
        };
        Ok((maps, out.logits.value().into_data()))
    }
}

pub struct TrainOutput<'t> {
    pub head: HeadOutput<'t>,
    pub logits: Var<'t>,
    pub spans: SpanSet,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Task;
    use crate::geom::PixelBox;
    use crate::loss::{total_loss, LossWeights, SearchGeometry};
    use crate::optim::OptimError;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            patch_size: 8,
            dim: 16,
            depth: 1,
            heads: 2,
            template_res: 16,
            search_res: 32,
            task_head_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn frame(task: Task, res: usize, fill: f64) -> ModalFrame {
        let rgb = Tensor::full(&[res, res, 3], fill);
        let aux = task
            .needs_aux()
            .then(|| Tensor::full(&[res, res, 3], 0.3));
        let language = task.needs_language().then(|| "red square".to_string());
        ModalFrame::new(task, rgb, aux, language).unwrap()
    }

    fn tpl(task: Task, res: usize, fill: f64) -> TemplateCrop {
        TemplateCrop {
            frame: frame(task, res, fill),
            bx: PixelBox::new(4.0, 4.0, 12.0, 12.0),
        }
    }

    #[test]
    fn registration_is_deterministic_and_grouped() {
        let a = Model::new(small_cfg(), 7).unwrap();
        let b = Model::new(small_cfg(), 7).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.data(), y.value.data());
        }
        let ps = &a.params;
        let g = |name: &str| ps.get(ps.id_of(name).unwrap()).group;
        assert_eq!(g("embed.patch.w"), ParamGroup::Encoder);
        assert_eq!(g("embed.pos.search"), ParamGroup::Encoder);
        assert_eq!(g("encoder.block0.attn.q.w"), ParamGroup::Encoder);
        assert_eq!(g("embed.type.fg"), ParamGroup::Other);
        assert_eq!(g("head.track.score.w"), ParamGroup::Other);
        assert_eq!(g("head.task.fc1.w"), ParamGroup::Other);
    }

    #[test]
    fn forward_produces_expected_shapes() {
        let model = Model::new(small_cfg(), 1).unwrap();
        let t = tpl(Task::Rgbt, 16, 0.5);
        let s = frame(Task::Rgbt, 32, 0.4);
        let tape = Tape::new();
        let out = model.forward(&tape, [&t, &t], &s).unwrap();
        assert_eq!(out.head.score.shape(), [4, 4]);
        assert_eq!(out.head.offset.shape(), [4, 4, 2]);
        assert_eq!(out.head.size.shape(), [4, 4, 2]);
        assert_eq!(out.logits.shape(), [5]);
        // 4 + 4 + 16 image tokens plus the text token.
        assert_eq!(out.spans.total, 25);
        let (maps, logits) = model.forward_maps([&t, &t], &s).unwrap();
        assert_eq!(maps.grid(), 4);
        assert_eq!(logits.len(), 5);
    }

    #[test]
    fn task_mismatch_is_an_error() {
        let model = Model::new(small_cfg(), 1).unwrap();
        let t = tpl(Task::Rgb, 16, 0.5);
        let s = frame(Task::Rgbt, 32, 0.4);
        assert!(matches!(
            model.forward_maps([&t, &t], &s),
            Err(ModelError::TaskMismatch)
        ));
    }

    #[test]
    fn wrong_crop_size_is_an_error() {
        let model = Model::new(small_cfg(), 1).unwrap();
        let t = tpl(Task::Rgb, 16, 0.5);
        let s = frame(Task::Rgb, 16, 0.4);
        assert!(matches!(
            model.forward_maps([&t, &t], &s),
            Err(ModelError::BadCrop { expected: 32, .. })
        ));
    }

    #[test]
    fn fusion_modes_change_sequence_length_only_for_concat() {
        for (fusion, total) in [
            (FusionMode::Concat, 25),
            (FusionMode::Add, 24),
            (FusionMode::Mul, 24),
        ] {
            let cfg = ModelConfig {
                fusion,
                ..small_cfg()
            };
            let model = Model::new(cfg, 1).unwrap();
            let t = tpl(Task::Rgbl, 16, 0.5);
            let s = frame(Task::Rgbl, 32, 0.4);
            let tape = Tape::new();
            let out = model.forward(&tape, [&t, &t], &s).unwrap();
            assert_eq!(out.spans.total, total);
        }
    }

    #[test]
    fn task_token_pooling_appends_a_token() {
        let cfg = ModelConfig {
            pooling: PoolingMode::ExtraTaskToken,
            ..small_cfg()
        };
        let model = Model::new(cfg, 1).unwrap();
        assert!(model.params.id_of("embed.task_token").is_some());
        let t = tpl(Task::Rgb, 16, 0.5);
        let s = frame(Task::Rgb, 32, 0.4);
        let tape = Tape::new();
        let out = model.forward(&tape, [&t, &t], &s).unwrap();
        assert_eq!(out.spans.total, 26);
        assert_eq!(out.spans.task, Some(25));
    }

    #[test]
    fn grid_aligned_boxes_make_soft_and_hard_typing_identical() {
        let mk = |mode| {
            let cfg = ModelConfig {
                token_type: mode,
                ..small_cfg()
            };
            Model::new(cfg, 3).unwrap()
        };
        let soft = mk(TokenTypeMode::Soft);
        let hard = mk(TokenTypeMode::Hard);
        // Box aligned to the 8px patch grid: every patch average is 0 or 1.
        let t = TemplateCrop {
            frame: frame(Task::Rgbd, 16, 0.6),
            bx: PixelBox::new(8.0, 0.0, 16.0, 8.0),
        };
        let s = frame(Task::Rgbd, 32, 0.4);
        let (a, la) = soft.forward_maps([&t, &t], &s).unwrap();
        let (b, lb) = hard.forward_maps([&t, &t], &s).unwrap();
        assert_eq!(a.score.data(), b.score.data());
        assert_eq!(a.offset.data(), b.offset.data());
        assert_eq!(a.size.data(), b.size.data());
        assert_eq!(la, lb);
    }

    #[test]
    fn full_loss_reaches_every_parameter() {
        let model = Model::new(small_cfg(), 5).unwrap();
        let t = tpl(Task::Rgbt, 16, 0.5);
        let s = frame(Task::Rgbt, 32, 0.4);
        let tape = Tape::new();
        let out = model.forward(&tape, [&t, &t], &s).unwrap();
        let gt = PixelBox::new(10.0, 6.0, 22.0, 18.0);
        let (loss, _) = total_loss(
            &tape,
            &out.head,
            out.logits,
            &gt,
            Task::Rgbt.index(),
            SearchGeometry { patch: 8 },
            &LossWeights::default(),
        )
        .unwrap();
        tape.backward(loss).unwrap();
        let mut ps = Model::new(small_cfg(), 5).unwrap().params;
        ps.accumulate_from(&tape);
        for (_, p) in ps.iter() {
            let g = p.grad.as_ref().unwrap_or_else(|| {
                panic!("parameter `{}` received no gradient", p.name)
            });
            assert!(g.all_finite(), "parameter `{}` gradient not finite", p.name);
        }
        // The optimizer accepts the fully populated gradient set.
        let mut opt = crate::optim::AdamW::new(&ps, crate::optim::AdamWConfig::default());
        let r: Result<(), OptimError> = opt.step(&mut ps);
        r.unwrap();
    }

    #[test]
    fn separate_embedding_registers_two_projections() {
        let cfg = ModelConfig {
            embed: EmbedMode::Separate,
            ..small_cfg()
        };
        let model = Model::new(cfg, 2).unwrap();
        assert!(model.params.id_of("embed.rgb.w").is_some());
        assert!(model.params.id_of("embed.aux.w").is_some());
        assert!(model.params.id_of("embed.patch.w").is_none());
        let t = tpl(Task::Rgbe, 16, 0.5);
        let s = frame(Task::Rgbe, 32, 0.4);
        let (maps, _) = model.forward_maps([&t, &t], &s).unwrap();
        assert!(maps.score.all_finite());
    }
}
