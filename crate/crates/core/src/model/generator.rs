use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{quantize_vertex, ElementClass, GridSpec, KeypointSet, VertexTokenSeq};
use crate::numerics::{Graph, NumericsError, ParamRegistry, Tensor};

use super::encoder::BEVFeatureGrid;
use super::layers::{Attention, FeedForward, LayerNormParams, Linear};
use super::ModelConfig;

type Result<T> = std::result::Result<T, NumericsError>;

/// Prompt fed to the generator: one class token followed by the
/// quantized keypoint coordinates, as input-vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorCondition {
    pub class: ElementClass,
    pub tokens: Vec<usize>,
}

impl GeneratorCondition {
    pub fn new(cfg: &ModelConfig, class: ElementClass, keypoints: &KeypointSet) -> Self {
        assert_eq!(keypoints.kind, cfg.repr, "keypoint representation mismatch");
        let mut tokens = Vec::with_capacity(cfg.prompt_len());
        tokens.push(cfg.class_token(class));
        for p in &keypoints.points {
            let (tx, ty) = quantize_vertex(*p, &cfg.grid);
            tokens.push(tx as usize);
            tokens.push(ty as usize);
        }
        debug_assert_eq!(tokens.len(), cfg.prompt_len());
        GeneratorCondition { class, tokens }
    }
}

/// Result of autoregressive decoding: raw coordinate tokens (EOS and
/// any trailing half-vertex stripped) plus overflow flagging.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutcome {
    pub coord_tokens: Vec<u32>,
    pub eos_overflow: bool,
}

impl DecodeOutcome {
    /// Re-attach EOS and validate against the grid vocabulary.
    pub fn into_token_seq(
        mut self,
        grid: &GridSpec,
    ) -> std::result::Result<VertexTokenSeq, crate::geometry::GeometryError> {
        if !self.coord_tokens.len().is_multiple_of(2) {
            self.coord_tokens.pop();
        }
        let mut tokens = self.coord_tokens;
        tokens.push(grid.eos_token());
        VertexTokenSeq::from_tokens(tokens, grid)
    }
}

/// Decoding strategy for [`Generator::decode`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Softmax sampling with a temperature; needs a caller-provided seed.
    Temperature(f64, u64),
}

struct GeneratorBlock {
    ln1: LayerNormParams,
    self_attn: Attention,
    ln2: LayerNormParams,
    cross_attn: Attention,
    ln3: LayerNormParams,
    ffn: FeedForward,
}

/// Autoregressive vertex-token decoder conditioned on class, keypoints
/// and BEV features.
pub struct Generator {
    value_embed: Tensor,
    /// Coordinate-slot embedding: x, y, or the reserved prompt slot.
    coord_embed: Tensor,
    /// Vertex-index embedding; prompt slots live past the vertex range.
    pos_embed: Tensor,
    blocks: Vec<GeneratorBlock>,
    final_norm: LayerNormParams,
    out_head: Linear,
}

const COORD_SLOT_X: usize = 0;
const COORD_SLOT_Y: usize = 1;
const COORD_SLOT_PROMPT: usize = 2;

impl Generator {
    pub fn new(
        g: &Graph,
        reg: &mut ParamRegistry,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.hidden;
        let pos_vocab = cfg.n_v_max + 1 + cfg.prompt_len();
        Generator {
            value_embed: reg.register("gen.value_embed", g.param_embedding(cfg.in_vocab(), d, rng)),
            coord_embed: reg.register("gen.coord_embed", g.param_embedding(3, d, rng)),
            pos_embed: reg.register("gen.pos_embed", g.param_embedding(pos_vocab, d, rng)),
            blocks: (0..cfg.gen_layers)
                .map(|i| {
                    let name = format!("gen.block{i}");
                    GeneratorBlock {
                        ln1: LayerNormParams::new(g, reg, &format!("{name}.ln1"), d),
                        self_attn: Attention::new(
                            g,
                            reg,
                            &format!("{name}.self_attn"),
                            d,
                            cfg.heads,
                            cfg.dropout,
                            rng,
                        ),
                        ln2: LayerNormParams::new(g, reg, &format!("{name}.ln2"), d),
                        cross_attn: Attention::new(
                            g,
                            reg,
                            &format!("{name}.cross_attn"),
                            d,
                            cfg.heads,
                            cfg.dropout,
                            rng,
                        ),
                        ln3: LayerNormParams::new(g, reg, &format!("{name}.ln3"), d),
                        ffn: FeedForward::new(
                            g,
                            reg,
                            &format!("{name}.ffn"),
                            d,
                            cfg.ffn_mult,
                            cfg.dropout,
                            rng,
                        ),
                    }
                })
                .collect(),
            final_norm: LayerNormParams::new(g, reg, "gen.final_norm", d),
            out_head: Linear::new(g, reg, "gen.out_head", d, cfg.out_vocab(), rng),
        }
    }

    /// Token embedding: value + coordinate-slot + vertex-position.
    fn embed_inputs(
        &self,
        cfg: &ModelConfig,
        cond: &GeneratorCondition,
        prefix: &[u32],
    ) -> Result<Tensor> {
        let prompt_len = cfg.prompt_len();
        let mut value_ids = Vec::with_capacity(prompt_len + prefix.len());
        let mut coord_ids = Vec::with_capacity(value_ids.capacity());
        let mut pos_ids = Vec::with_capacity(value_ids.capacity());
        for (j, &tok) in cond.tokens.iter().enumerate() {
            if tok >= cfg.in_vocab() {
                return Err(NumericsError::Shape {
                    op: "generator_embed",
                    detail: format!("prompt token {tok} outside the vocabulary"),
                });
            }
            value_ids.push(tok);
            coord_ids.push(COORD_SLOT_PROMPT);
            pos_ids.push(cfg.n_v_max + 1 + j);
        }
        for (t, &tok) in prefix.iter().enumerate() {
            let tok = tok as usize;
            if tok >= cfg.coord_vocab() {
                return Err(NumericsError::Shape {
                    op: "generator_embed",
                    detail: format!("prefix token {tok} is not a coordinate token"),
                });
            }
            value_ids.push(tok);
            coord_ids.push(if t % 2 == 0 { COORD_SLOT_X } else { COORD_SLOT_Y });
            pos_ids.push((t / 2).min(cfg.n_v_max));
        }
        let value = self.value_embed.embed(&value_ids)?;
        let coord = self.coord_embed.embed(&coord_ids)?;
        let pos = self.pos_embed.embed(&pos_ids)?;
        value.add(&coord)?.add(&pos)?.dropout(cfg.dropout)
    }

    /// Full-sequence forward pass: causal self-attention over
    /// [prompt, prefix], cross-attention to the BEV features, and
    /// next-token logits for every position.
    pub fn forward_tokens(
        &self,
        g: &Graph,
        cfg: &ModelConfig,
        cond: &GeneratorCondition,
        prefix: &[u32],
        features: &BEVFeatureGrid,
    ) -> Result<Tensor> {
        let mut x = self.embed_inputs(cfg, cond, prefix)?;
        for block in &self.blocks {
            let normed = block.ln1.forward(&x)?;
            x = x.add(&block.self_attn.forward(g, &normed, &normed, true)?)?;
            let normed = block.ln2.forward(&x)?;
            x = x.add(&block.cross_attn.forward(g, &normed, &features.tokens, false)?)?;
            x = x.add(&block.ffn.forward(&block.ln3.forward(&x)?)?)?;
        }
        self.out_head.forward(&self.final_norm.forward(&x)?)
    }

    /// Next-token logits after the given prefix (the last row of the
    /// full forward pass).
    pub fn step(
        &self,
        g: &Graph,
        cfg: &ModelConfig,
        cond: &GeneratorCondition,
        prefix: &[u32],
        features: &BEVFeatureGrid,
    ) -> Result<Tensor> {
        let logits = self.forward_tokens(g, cfg, cond, prefix, features)?;
        logits.slice_rows(logits.rows() - 1, 1)
    }

    /// Teacher-forced negative log-likelihood, mean over the target
    /// sequence (coordinates plus EOS). Inputs may be noise-augmented;
    /// targets are the clean tokens.
    pub fn teacher_nll(
        &self,
        g: &Graph,
        cfg: &ModelConfig,
        cond: &GeneratorCondition,
        input_coords: &[u32],
        targets: &[u32],
        features: &BEVFeatureGrid,
    ) -> Result<Tensor> {
        if input_coords.len() + 1 != targets.len() {
            return Err(NumericsError::Shape {
                op: "teacher_nll",
                detail: format!(
                    "{} input tokens cannot predict {} targets",
                    input_coords.len(),
                    targets.len()
                ),
            });
        }
        let logits = self.forward_tokens(g, cfg, cond, input_coords, features)?;
        let predict = logits.slice_rows(cfg.prompt_len() - 1, targets.len())?;
        let t: Vec<usize> = targets.iter().map(|&v| v as usize).collect();
        let w = vec![1.0 / targets.len() as f64; targets.len()];
        predict.cross_entropy(&t, &w)
    }

    /// Autoregressive decode until EOS or the length cap, masking
    /// tokens that are invalid for the current coordinate slot. The
    /// tape is rewound to `rewind_mark` before every step.
    pub fn decode(
        &self,
        g: &Graph,
        cfg: &ModelConfig,
        cond: &GeneratorCondition,
        features: &BEVFeatureGrid,
        mode: DecodeMode,
        rewind_mark: usize,
    ) -> Result<DecodeOutcome> {
        let eos = cfg.coord_vocab();
        let max_coords = 2 * cfg.n_v_max;
        let mut coords: Vec<u32> = Vec::new();
        let mut eos_overflow = true;
        let mut sampler = match mode {
            DecodeMode::Temperature(_, seed) => {
                Some(<ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed))
            }
            DecodeMode::Greedy => None,
        };
        while coords.len() < max_coords {
            g.rewind(rewind_mark);
            let logits = self.step(g, cfg, cond, &coords, features)?;
            let row = logits.value();
            let limit = if coords.len().is_multiple_of(2) {
                cfg.grid.width_cells
            } else {
                cfg.grid.height_cells
            };
            let valid = |tok: usize| tok == eos || tok < limit;
            let chosen = match (&mode, sampler.as_mut()) {
                (DecodeMode::Greedy, _) => row
                    .iter()
                    .enumerate()
                    .filter(|(tok, _)| valid(*tok))
                    .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                    .map(|(tok, _)| tok)
                    .unwrap(),
                (DecodeMode::Temperature(temp, _), Some(rng)) => {
                    let temp = temp.max(1e-6);
                    let max = row
                        .iter()
                        .enumerate()
                        .filter(|(tok, _)| valid(*tok))
                        .map(|(_, v)| *v)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let weights: Vec<(usize, f64)> = row
                        .iter()
                        .enumerate()
                        .filter(|(tok, _)| valid(*tok))
                        .map(|(tok, v)| (tok, ((v - max) / temp).exp()))
                        .collect();
                    let total: f64 = weights.iter().map(|(_, w)| w).sum();
                    let mut draw = rng.gen_range(0.0..total);
                    let mut pick = weights.last().unwrap().0;
                    for (tok, w) in &weights {
                        if draw < *w {
                            pick = *tok;
                            break;
                        }
                        draw -= w;
                    }
                    pick
                }
                _ => unreachable!(),
            };
            if chosen == eos {
                eos_overflow = false;
                break;
            }
            coords.push(chosen as u32);
        }
        g.rewind(rewind_mark);
        Ok(DecodeOutcome {
            coord_tokens: coords,
            eos_overflow,
        })
    }
}
