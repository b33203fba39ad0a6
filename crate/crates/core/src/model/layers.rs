use rand_chacha::ChaCha8Rng;

use crate::numerics::{concat_cols, Graph, NumericsError, ParamRegistry, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

use crate::numerics::ATTENTION_MASK_VALUE;

pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(
        g: &Graph,
        reg: &mut ParamRegistry,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            w: reg.register(format!("{name}.w"), g.param_xavier(d_in, d_out, rng)),
            b: Some(reg.register(format!("{name}.b"), g.param(1, d_out, vec![0.0; d_out]))),
        }
    }

    /// Projection without a bias term. Query/key/value projections use
    /// this: a key bias shifts every attention row uniformly, which the
    /// softmax cancels, leaving a parameter with an exactly-zero
    /// gradient.
    pub fn without_bias(
        g: &Graph,
        reg: &mut ParamRegistry,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            w: reg.register(format!("{name}.w"), g.param_xavier(d_in, d_out, rng)),
            b: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => out.add_row(b),
            None => Ok(out),
        }
    }
}

pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(g: &Graph, reg: &mut ParamRegistry, name: &str, d: usize) -> Self {
        LayerNormParams {
            gamma: reg.register(format!("{name}.gamma"), g.param(1, d, vec![1.0; d])),
            beta: reg.register(format!("{name}.beta"), g.param(1, d, vec![0.0; d])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta)
    }
}

/// Multi-head attention over 2D (tokens x hidden) tensors. Queries and
/// key/value sources may differ (cross-attention).
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dropout: f64,
}

impl Attention {
    pub fn new(
        g: &Graph,
        reg: &mut ParamRegistry,
        name: &str,
        d: usize,
        heads: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d.is_multiple_of(heads), "hidden size must divide into heads");
        Attention {
            q: Linear::without_bias(g, reg, &format!("{name}.q"), d, d, rng),
            k: Linear::without_bias(g, reg, &format!("{name}.k"), d, d, rng),
            v: Linear::without_bias(g, reg, &format!("{name}.v"), d, d, rng),
            o: Linear::new(g, reg, &format!("{name}.o"), d, d, rng),
            heads,
            dropout,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor, kv: &Tensor, causal: bool) -> Result<Tensor> {
        let d = x.cols();
        let dh = d / self.heads;
        let tq = x.rows();
        let tk = kv.rows();
        let q = self.q.forward(x)?;
        let k = self.k.forward(kv)?;
        let v = self.v.forward(kv)?;

        let mask = if causal {
            debug_assert_eq!(tq, tk, "causal attention needs square scores");
            let mut m = vec![0.0; tq * tk];
            for i in 0..tq {
                for j in i + 1..tk {
                    m[i * tk + j] = ATTENTION_MASK_VALUE;
                }
            }
            Some(g.constant(tq, tk, m))
        } else {
            None
        };

        let mut head_outputs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let mut scores = qh
                .matmul(&kh.transpose()?)?
                .scale(1.0 / (dh as f64).sqrt())?;
            if let Some(m) = &mask {
                scores = scores.add(m)?;
            }
            let probs = scores.softmax()?.dropout(self.dropout)?;
            head_outputs.push(probs.matmul(&vh)?);
        }
        self.o.forward(&concat_cols(&head_outputs)?)
    }
}

pub struct FeedForward {
    up: Linear,
    down: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn new(
        g: &Graph,
        reg: &mut ParamRegistry,
        name: &str,
        d: usize,
        mult: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            up: Linear::new(g, reg, &format!("{name}.up"), d, d * mult, rng),
            down: Linear::new(g, reg, &format!("{name}.down"), d * mult, d, rng),
            dropout,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down
            .forward(&self.up.forward(x)?.gelu()?.dropout(self.dropout)?)
    }
}

/// Pre-norm self-attention block: x + attn(ln(x)), x + ffn(ln(x)).
pub struct EncoderBlock {
    ln1: LayerNormParams,
    attn: Attention,
    ln2: LayerNormParams,
    ffn: FeedForward,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        g: &Graph,
        reg: &mut ParamRegistry,
        name: &str,
        d: usize,
        heads: usize,
        ffn_mult: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderBlock {
            ln1: LayerNormParams::new(g, reg, &format!("{name}.ln1"), d),
            attn: Attention::new(g, reg, &format!("{name}.attn"), d, heads, dropout, rng),
            ln2: LayerNormParams::new(g, reg, &format!("{name}.ln2"), d),
            ffn: FeedForward::new(g, reg, &format!("{name}.ffn"), d, ffn_mult, dropout, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let normed = self.ln1.forward(x)?;
        let x = x.add(&self.attn.forward(g, &normed, &normed, false)?)?;
        let y = self.ffn.forward(&self.ln2.forward(&x)?)?;
        x.add(&y)
    }
}

/// Two-layer MLP head with GELU in between.
pub struct MlpHead {
    hidden: Linear,
    out: Linear,
}

impl MlpHead {
    pub fn new(
        g: &Graph,
        reg: &mut ParamRegistry,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        MlpHead {
            hidden: Linear::new(g, reg, &format!("{name}.hidden"), d_in, d_hidden, rng),
            out: Linear::new(g, reg, &format!("{name}.out"), d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.gelu()?)
    }
}

/// 2D sinusoidal positional encoding over a (h x w) token grid; the
/// first half of the channels encodes the column, the second the row.
pub fn sinusoidal_pe_2d(h: usize, w: usize, d: usize) -> Vec<f64> {
    assert!(d.is_multiple_of(4), "positional encoding needs hidden divisible by 4");
    let quarter = d / 4;
    let mut pe = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let base = (r * w + c) * d;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                pe[base + 2 * i] = (c as f64 * freq).sin();
                pe[base + 2 * i + 1] = (c as f64 * freq).cos();
                pe[base + d / 2 + 2 * i] = (r as f64 * freq).sin();
                pe[base + d / 2 + 2 * i + 1] = (r as f64 * freq).cos();
            }
        }
    }
    pe
}
