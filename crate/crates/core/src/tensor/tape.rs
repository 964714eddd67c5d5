use super::kernels::{gelu_grad_scalar, gelu_scalar, gemm, layer_norm_rows, softmax_rows, stream_key, uniform_at, MatRef};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<F> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        groups: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    /// out[i] = x[i] + y[(i / (block * repeats)) * block + i % block]
    AddBroadcast {
        x: usize,
        y: usize,
        block: usize,
        repeats: usize,
    },
    Scale {
        x: usize,
        factor: F,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
        dim: usize,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cols: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu {
        x: usize,
    },
    Tanh {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<F>,
    },
    SplitHeads {
        x: usize,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: usize,
        batch: usize,
        len: usize,
        heads: usize,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
        eps: F,
        scale: F,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every gradient-requiring leaf.
#[derive(Debug)]
pub struct Gradients<F> {
    by_leaf: Vec<Option<Vec<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.by_leaf.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.by_leaf.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Records primitive operations for one forward pass and replays them
/// in reverse to produce gradients.
///
/// Dropout masks are drawn from a counter-based generator keyed by
/// `(seed, step, node index, element)`, so a forward pass can be replayed
/// exactly from those four numbers.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    mode: Mode,
    seed: u64,
    step: u64,
    strict_finite: bool,
    consumed: bool,
}

impl<F: Float> Tape<F> {
    pub fn new(mode: Mode) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
            seed: 0,
            step: 0,
            strict_finite: false,
            consumed: false,
        }
    }

    /// Keys the dropout generator.
    pub fn with_rng(mut self, seed: u64, step: u64) -> Self {
        self.seed = seed;
        self.step = step;
        self
    }

    pub fn with_strict_finite(mut self, flag: bool) -> Self {
        self.strict_finite = flag;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drops all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by backward; reset it before recording".into(),
            ));
        }
        Ok(())
    }

    fn check_finite(&self, op: &'static str, inputs: &[usize]) -> Result<()> {
        if !self.strict_finite {
            return Ok(());
        }
        for &i in inputs {
            if let Some(pos) = self.nodes[i].value.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    op,
                    detail: format!("non-finite input value at flat index {pos}"),
                });
            }
        }
        Ok(())
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a copy of `t`; it receives gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let shape = t.shape().to_vec();
        Ok(self.push(shape, t.into_data(), Op::Leaf, false))
    }

    /// Matrix product over the last two dimensions.
    ///
    /// `a: [M, K] x b: [K, N]` or batched `a: [G, M, K] x b: [G, K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` over the last two dimensions: `a: [.., M, K]`, `b: [.., N, K]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.live()?;
        self.check_finite("matmul", &[a.0, b.0])?;
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let bad = || {
            Error::dim(
                "matmul",
                format!("incompatible shapes {sa:?} x {sb:?} (transpose_b = {trans_b})"),
            )
        };
        let (groups, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (bk, bn) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if sa[1] != bk {
                    return Err(bad());
                }
                (1, sa[0], sa[1], bn, vec![sa[0], bn])
            }
            (3, 3) => {
                let (bk, bn) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa[0] != sb[0] || sa[2] != bk {
                    return Err(bad());
                }
                (sa[0], sa[1], sa[2], bn, vec![sa[0], sa[1], bn])
            }
            _ => return Err(bad()),
        };
        let mut out = vec![F::zero(); groups * m * n];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bview = if trans_b {
            MatRef::dense(n, k).t()
        } else {
            MatRef::dense(k, n)
        };
        for g in 0..groups {
            gemm(
                &av[g * m * k..(g + 1) * m * k],
                MatRef::dense(m, k),
                &bv[g * k * n..(g + 1) * k * n],
                bview,
                &mut out[g * m * n..(g + 1) * m * n],
                false,
            );
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            out_shape,
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                groups,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        self.check_finite("add", &[a.0, b.0])?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::dim(
                "add",
                format!("shapes {:?} and {:?} differ", na.shape, nb.shape),
            ));
        }
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| x + y).collect();
        let shape = na.shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Adds `y` to `x`, reusing each contiguous `y` block `repeats` times.
    ///
    /// Covers bias rows (`block = d`, `repeats = rows`), a positional table
    /// tiled over a batch (`block = len * d`, `repeats = batch`), and a
    /// per-example attention mask shared by all heads (`block = T * S`,
    /// `repeats = heads`).
    pub fn add_broadcast(&mut self, x: Var, y: Var, block: usize, repeats: usize) -> Result<Var> {
        self.live()?;
        self.check_finite("add_broadcast", &[x.0, y.0])?;
        let (nx, ny) = (&self.nodes[x.0], &self.nodes[y.0]);
        if block == 0
            || ny.value.len() % block != 0
            || ny.value.len() * repeats != nx.value.len()
        {
            return Err(Error::dim(
                "add_broadcast",
                format!(
                    "cannot broadcast {:?} over {:?} with block {block} x {repeats}",
                    ny.shape, nx.shape
                ),
            ));
        }
        let mut out = nx.value.clone();
        for (chunk, yb) in out.chunks_mut(block * repeats).zip(ny.value.chunks(block)) {
            for xb in chunk.chunks_mut(block) {
                xb.iter_mut().zip(yb).for_each(|(o, &b)| *o += b);
            }
        }
        let shape = nx.shape.clone();
        let rg = self.rg(&[x.0, y.0]);
        Ok(self.push(
            shape,
            out,
            Op::AddBroadcast {
                x: x.0,
                y: y.0,
                block,
                repeats,
            },
            rg,
        ))
    }

    /// `x + bias` with `bias` broadcast along every row of the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.nodes[bias.0].value.len();
        let rows = if d == 0 { 0 } else { self.nodes[x.0].value.len() / d };
        if self.nodes[x.0].shape.last() != Some(&d) {
            return Err(Error::dim(
                "add_bias",
                format!(
                    "bias of length {d} for input shape {:?}",
                    self.nodes[x.0].shape
                ),
            ));
        }
        self.add_broadcast(x, bias, d, rows)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.live()?;
        self.check_finite("scale", &[x.0])?;
        let f = F::of(factor);
        let n = &self.nodes[x.0];
        let out = n.value.iter().map(|&v| v * f).collect();
        let shape = n.shape.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, out, Op::Scale { x: x.0, factor: f }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        self.check_finite("elementwise_mul", &[a.0, b.0])?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::dim(
                "elementwise_mul",
                format!("shapes {:?} and {:?} differ", na.shape, nb.shape),
            ));
        }
        let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| x * y).collect();
        let shape = na.shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    /// Gathers rows of `table: [V, D]`, giving `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.live()?;
        self.check_finite("embedding_lookup", &[table.0])?;
        let nt = &self.nodes[table.0];
        if nt.shape.len() != 2 {
            return Err(Error::dim(
                "embedding_lookup",
                format!("table must be 2-d, got {:?}", nt.shape),
            ));
        }
        let (vocab, dim) = (nt.shape[0], nt.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!(
                    "embedding id {id} outside table of {vocab} rows"
                )));
            }
            out.extend_from_slice(&nt.value[id * dim..(id + 1) * dim]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
                dim,
            },
            rg,
        ))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        self.check_finite("softmax_lastdim", &[x.0])?;
        let n = &self.nodes[x.0];
        let cols = *n.shape.last().ok_or_else(|| Error::dim("softmax_lastdim", "scalar input"))?;
        let out = softmax_rows(&n.value, cols.max(1));
        let shape = n.shape.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, out, Op::Softmax { x: x.0, cols }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.live()?;
        self.check_finite("layer_norm", &[x.0, gamma.0, beta.0])?;
        let (nx, ng, nb) = (&self.nodes[x.0], &self.nodes[gamma.0], &self.nodes[beta.0]);
        let cols = *nx.shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if ng.value.len() != cols || nb.value.len() != cols {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} do not match last dim of {:?}",
                    ng.shape, nb.shape, nx.shape
                ),
            ));
        }
        let (y, xhat, inv_std) = layer_norm_rows(&nx.value, cols, &ng.value, &nb.value, F::of(eps));
        let shape = nx.shape.clone();
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        let (xhat, inv_std) = if rg { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(
            shape,
            y,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                cols,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        self.live()?;
        self.check_finite(name, &[x.0])?;
        let n = &self.nodes[x.0];
        let out = n.value.iter().map(|&v| f(v)).collect();
        let shape = n.shape.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, out, op, rg))
    }

    /// Exact gelu, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| F::of(gelu_scalar(v.as_f64())), Op::Gelu { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, |v| v.tanh(), Op::Tanh { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            x,
            |v| F::one() / (F::one() + (-v).exp()),
            Op::Sigmoid { x: x.0 },
        )
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` in training
    /// mode; eval mode (or `p == 0`) returns `x` itself.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.live()?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout probability {p} not in [0, 1)")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        self.check_finite("dropout", &[x.0])?;
        let key = stream_key(self.seed, self.step, self.nodes.len() as u64);
        let keep = F::of(1.0 / (1.0 - p));
        let n = &self.nodes[x.0];
        let mask: Vec<F> = (0..n.value.len())
            .map(|i| {
                if uniform_at(key, i as u64) < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = n.value.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = n.shape.clone();
        let rg = self.rg(&[x.0]);
        let mask = if rg { mask } else { Vec::new() };
        Ok(self.push(shape, out, Op::Dropout { x: x.0, mask }, rg))
    }

    /// `[B*T, H*Dh] -> [B*H, T, Dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        self.live()?;
        let n = &self.nodes[x.0];
        let d = n.shape.last().copied().unwrap_or(0);
        if n.shape.len() != 2 || n.shape[0] != batch * len || heads == 0 || d % heads != 0 {
            return Err(Error::dim(
                "split_heads",
                format!("{:?} into batch {batch}, len {len}, heads {heads}", n.shape),
            ));
        }
        let dh = d / heads;
        let mut out = vec![F::zero(); n.value.len()];
        for b in 0..batch {
            for t in 0..len {
                let src = (b * len + t) * d;
                for h in 0..heads {
                    let dst = ((b * heads + h) * len + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&n.value[src + h * dh..src + (h + 1) * dh]);
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            vec![batch * heads, len, dh],
            out,
            Op::SplitHeads {
                x: x.0,
                batch,
                len,
                heads,
            },
            rg,
        ))
    }

    /// `[B*H, T, Dh] -> [B*T, H*Dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        self.live()?;
        let n = &self.nodes[x.0];
        if n.shape.len() != 3 || n.shape[0] != batch * heads {
            return Err(Error::dim(
                "merge_heads",
                format!("{:?} with batch {batch}, heads {heads}", n.shape),
            ));
        }
        let (len, dh) = (n.shape[1], n.shape[2]);
        let d = heads * dh;
        let mut out = vec![F::zero(); n.value.len()];
        for b in 0..batch {
            for t in 0..len {
                let dst = (b * len + t) * d;
                for h in 0..heads {
                    let src = ((b * heads + h) * len + t) * dh;
                    out[dst + h * dh..dst + (h + 1) * dh].copy_from_slice(&n.value[src..src + dh]);
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            vec![batch * len, d],
            out,
            Op::MergeHeads {
                x: x.0,
                batch,
                len,
                heads,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.live()?;
        let n = &self.nodes[x.0];
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} cannot become {shape:?}", n.shape),
            ));
        }
        let out = n.value.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, out, Op::Reshape { x: x.0 }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        self.check_finite("sum", &[x.0])?;
        let s = self.nodes[x.0].value.iter().copied().sum();
        let rg = self.rg(&[x.0]);
        Ok(self.push(vec![], vec![s], Op::Sum { x: x.0 }, rg))
    }

    /// Label-smoothed cross-entropy over `logits: [N, V]`.
    ///
    /// Each non-pad row contributes
    /// `-[(1 - eps) log p(target) + eps * mean_v log p(v)]`. The summed loss is
    /// divided by `normalizer` when given (used to share one token count
    /// across accumulated micro-batches), else by the number of non-pad rows.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        pad_id: Option<usize>,
        normalizer: Option<f64>,
    ) -> Result<Var> {
        self.live()?;
        self.check_finite("cross_entropy", &[logits.0])?;
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Contract(format!("label smoothing {eps} not in [0, 1)")));
        }
        let n = &self.nodes[logits.0];
        if n.shape.len() != 2 || n.shape[0] != targets.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {:?} for {} targets", n.shape, targets.len()),
            ));
        }
        let vocab = n.shape[1];
        let mut kept = Vec::with_capacity(targets.len());
        for &t in targets {
            if t >= vocab {
                return Err(Error::Index(format!("target {t} outside vocabulary of {vocab}")));
            }
            kept.push(if Some(t) == pad_id { None } else { Some(t) });
        }
        let count = kept.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let denom = normalizer.unwrap_or(count as f64);
        let probs = softmax_rows(&n.value, vocab);
        let mut total = 0.0f64;
        for (r, t) in kept.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &n.value[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max).as_f64();
            let lse = max + row.iter().map(|&v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            let mean_logp = row.iter().map(|&v| v.as_f64()).sum::<f64>() / vocab as f64 - lse;
            let logp_t = row[t].as_f64() - lse;
            total += -((1.0 - eps) * logp_t + eps * mean_logp);
        }
        let rg = self.rg(&[logits.0]);
        let probs = if rg { probs } else { Vec::new() };
        Ok(self.push(
            vec![],
            vec![F::of(total / denom)],
            Op::CrossEntropy {
                logits: logits.0,
                targets: kept,
                probs,
                eps: F::of(eps),
                scale: F::of(1.0 / denom),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every gradient-requiring leaf gets an entry; leaves the loss does not
    /// depend on get zeros. The tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let by_leaf = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf if n.requires_grad => {
                    Some(grads[i].take().unwrap_or_else(|| vec![F::zero(); n.value.len()]))
                }
                _ => None,
            })
            .collect();
        self.nodes.clear();
        self.consumed = true;
        Ok(Gradients { by_leaf })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let want = |j: usize| nodes[j].requires_grad;
        macro_rules! acc {
            ($j:expr) => {
                slot(grads, $j, nodes[$j].value.len())
            };
        }
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                groups,
                m,
                k,
                n,
                trans_b,
            } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                if want(a) {
                    let ga = acc!(a);
                    let bview = if trans_b {
                        MatRef::dense(n, k)
                    } else {
                        MatRef::dense(k, n).t()
                    };
                    for gi in 0..groups {
                        gemm(
                            &g[gi * m * n..(gi + 1) * m * n],
                            MatRef::dense(m, n),
                            &bv[gi * k * n..(gi + 1) * k * n],
                            bview,
                            &mut ga[gi * m * k..(gi + 1) * m * k],
                            true,
                        );
                    }
                }
                if want(b) {
                    let gb = acc!(b);
                    for gi in 0..groups {
                        let gs = &g[gi * m * n..(gi + 1) * m * n];
                        let as_ = &av[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if trans_b {
                            // db: [N, K] = g^T [N, M] * a [M, K]
                            gemm(gs, MatRef::dense(m, n).t(), as_, MatRef::dense(m, k), out, true);
                        } else {
                            // db: [K, N] = a^T [K, M] * g [M, N]
                            gemm(as_, MatRef::dense(m, k).t(), gs, MatRef::dense(m, n), out, true);
                        }
                    }
                }
            }
            &Op::Add { a, b } => {
                for j in [a, b] {
                    if want(j) {
                        acc!(j).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::AddBroadcast {
                x,
                y,
                block,
                repeats,
            } => {
                if want(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
                if want(y) {
                    let gy = acc!(y);
                    for (gb, chunk) in gy.chunks_mut(block).zip(g.chunks(block * repeats)) {
                        for c in chunk.chunks(block) {
                            gb.iter_mut().zip(c).for_each(|(d, &v)| *d += v);
                        }
                    }
                }
            }
            &Op::Scale { x, factor } => {
                if want(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(d, &v)| *d += v * factor);
                }
            }
            &Op::Mul { a, b } => {
                if want(a) {
                    let bv = &nodes[b].value;
                    acc!(a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (&gv, &y))| *d += gv * y);
                }
                if want(b) {
                    let av = &nodes[a].value;
                    acc!(b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (&gv, &x))| *d += gv * x);
                }
            }
            Op::Embedding { table, ids, dim } => {
                if want(*table) {
                    let gt = acc!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        gt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &v)| *d += v);
                    }
                }
            }
            &Op::Softmax { x, cols } => {
                if want(x) {
                    let y = &nodes[i].value;
                    let gx = acc!(x);
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            } => {
                let cols = *cols;
                let gam = &nodes[*gamma].value;
                if want(*gamma) {
                    let gg = acc!(*gamma);
                    for (hr, gr) in xhat.chunks(cols).zip(g.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if want(*beta) {
                    let gb = acc!(*beta);
                    for gr in g.chunks(cols) {
                        for j in 0..cols {
                            gb[j] += gr[j];
                        }
                    }
                }
                if want(*x) {
                    let gx = acc!(*x);
                    let nf = F::of(cols as f64);
                    let mut dxhat = vec![F::zero(); cols];
                    for (r, (hr, gr)) in xhat.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let inv = inv_std[r];
                        let dr = &mut gx[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dr[j] += inv / nf * (nf * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                if want(x) {
                    let xv = &nodes[x].value;
                    acc!(x)
                        .iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(d, (&gv, &v))| *d += gv * F::of(gelu_grad_scalar(v.as_f64())));
                }
            }
            &Op::Tanh { x } => {
                if want(x) {
                    let y = &nodes[i].value;
                    acc!(x)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (&gv, &t))| *d += gv * (F::one() - t * t));
                }
            }
            &Op::Sigmoid { x } => {
                if want(x) {
                    let y = &nodes[i].value;
                    acc!(x)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(d, (&gv, &s))| *d += gv * s * (F::one() - s));
                }
            }
            Op::Dropout { x, mask } => {
                if want(*x) {
                    acc!(*x)
                        .iter_mut()
                        .zip(g.iter().zip(mask))
                        .for_each(|(d, (&gv, &m))| *d += gv * m);
                }
            }
            &Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            } => {
                if want(x) {
                    let gx = acc!(x);
                    let d = nodes[x].shape[1];
                    let dh = d / heads;
                    for b in 0..batch {
                        for t in 0..len {
                            let dst = (b * len + t) * d;
                            for h in 0..heads {
                                let src = ((b * heads + h) * len + t) * dh;
                                for j in 0..dh {
                                    gx[dst + h * dh + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            } => {
                if want(x) {
                    let gx = acc!(x);
                    let dh = nodes[x].shape[2];
                    let d = heads * dh;
                    for b in 0..batch {
                        for t in 0..len {
                            let src = (b * len + t) * d;
                            for h in 0..heads {
                                let dst = ((b * heads + h) * len + t) * dh;
                                for j in 0..dh {
                                    gx[dst + j] += g[src + h * dh + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::Reshape { x } => {
                if want(x) {
                    acc!(x).iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
            &Op::Sum { x } => {
                if want(x) {
                    let s = g[0];
                    acc!(x).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                eps,
                scale,
            } => {
                if want(*logits) {
                    let vocab = nodes[*logits].shape[1];
                    let gl = acc!(*logits);
                    let up = g[0] * *scale;
                    let uniform = *eps / F::of(vocab as f64);
                    let on = F::one() - *eps;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        let dr = &mut gl[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            let mut target = uniform;
                            if j == t {
                                target += on;
                            }
                            dr[j] += up * (pr[j] - target);
                        }
                    }
                }
            }
        }
    }
}

fn slot<F: Float>(grads: &mut [Option<Vec<F>>], j: usize, len: usize) -> &mut Vec<F> {
    grads[j].get_or_insert_with(|| vec![F::zero(); len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn leaf(t: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        t.leaf(&Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new(Mode::Train);
        let x = leaf(&mut t, vec![3], vec![1.0, 2.0, 3.0]);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn frozen_gamma_gets_no_grad() {
        let mut t = Tape::new(Mode::Train);
        let x = leaf(&mut t, vec![1, 3], vec![0.5, -1.0, 2.0]);
        let gamma = t.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 0.5]).unwrap());
        let beta = t.leaf(&Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let w = t.constant(vec![1, 3], vec![1.0, -2.0, 0.3]).unwrap();
        let y = t.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let y = t.mul(y, w).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.backward(loss).unwrap();
        assert!(g.get(gamma).is_none());
        assert!(g.get(beta).is_none());
        assert!(g.get(x).unwrap().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut t = Tape::new(Mode::Train);
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        let unused = leaf(&mut t, vec![2], vec![5.0, 6.0]);
        let loss = t.sum(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut t = Tape::<f64>::new(Mode::Train);
        let x = leaf(&mut t, vec![2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let loss = t.sum(x).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(Error::State(_))));
        assert!(matches!(t.sum(x), Err(Error::State(_))));
        t.reset();
        let x = leaf(&mut t, vec![1], vec![1.0]);
        assert!(t.backward(x).is_ok());

        let mut empty = Tape::<f64>::new(Mode::Train);
        assert!(matches!(empty.backward(Var(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut t = Tape::<f64>::new(Mode::Train);
        let a = leaf(&mut t, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut t, vec![2, 3], vec![0.0; 6]);
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        assert!(t.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn strict_finite_rejects_nan() {
        let mut t = Tape::<f64>::new(Mode::Train).with_strict_finite(true);
        let x = leaf(&mut t, vec![2], vec![1.0, f64::NAN]);
        assert!(matches!(t.tanh(x), Err(Error::Numeric { .. })));
        let mut lax = Tape::<f64>::new(Mode::Train);
        let x = leaf(&mut lax, vec![2], vec![1.0, f64::NAN]);
        assert!(lax.tanh(x).is_ok());
    }

    #[test]
    fn dropout_modes() {
        let data: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let mut eval = Tape::new(Mode::Eval);
        let x = leaf(&mut eval, vec![1000], data.clone());
        assert_eq!(eval.dropout(x, 0.5).unwrap(), x);

        let run = |seed| {
            let mut t = Tape::new(Mode::Train).with_rng(seed, 9);
            let x = leaf(&mut t, vec![1000], data.clone());
            let y = t.dropout(x, 0.25).unwrap();
            t.value(y).to_vec()
        };
        let (a, b) = (run(1), run(1));
        assert_eq!(a, b);
        assert_ne!(a, run(2));
        let dropped = a.iter().zip(&data).filter(|(y, x)| **y == 0.0 && **x != 0.0).count();
        assert!((150..350).contains(&dropped), "{dropped}");
        for (y, x) in a.iter().zip(&data) {
            if *y != 0.0 {
                assert_abs_diff_eq!(*y, x / 0.75, epsilon = 1e-9);
            }
        }
        let mut t = Tape::<f64>::new(Mode::Train);
        let x = leaf(&mut t, vec![1], vec![1.0]);
        assert!(t.dropout(x, 1.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        // uniform logits: ln V
        let mut t = Tape::<f64>::new(Mode::Train);
        let l = t.constant(vec![2, 5], vec![0.3; 10]).unwrap();
        let loss = t.cross_entropy(l, &[1, 4], 0.0, None, None).unwrap();
        assert_abs_diff_eq!(t.value(loss)[0], 5f64.ln(), epsilon = 1e-12);

        // hand softmax: p0 = 3 / 4
        let l = t.constant(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap();
        let loss = t.cross_entropy(l, &[0], 0.0, None, None).unwrap();
        assert_abs_diff_eq!(t.value(loss)[0], 0.287_682, epsilon = 1e-6);

        // eps = 1 limit is excluded by the contract, but near it the target
        // weight vanishes
        let l = t.constant(vec![1, 3], vec![0.1, 2.0, -1.0]).unwrap();
        let a = t.cross_entropy(l, &[0], 0.999_999_999, None, None).unwrap();
        let b = t.cross_entropy(l, &[2], 0.999_999_999, None, None).unwrap();
        assert_abs_diff_eq!(t.value(a)[0], t.value(b)[0], epsilon = 1e-7);

        // padding excluded from the mean
        let l = t.constant(vec![2, 2], vec![3f64.ln(), 0.0, 5.0, -5.0]).unwrap();
        let loss = t.cross_entropy(l, &[0, 1], 0.0, Some(1), None).unwrap();
        assert_abs_diff_eq!(t.value(loss)[0], 0.287_682, epsilon = 1e-6);

        assert!(matches!(
            t.cross_entropy(l, &[1, 1], 0.0, Some(1), None),
            Err(Error::DegenerateBatch)
        ));
        assert!(matches!(
            t.cross_entropy(l, &[0, 7], 0.0, None, None),
            Err(Error::Index(_))
        ));
    }
}
