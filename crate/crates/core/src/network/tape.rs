//! Minimal reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records one forward pass. Parameters are borrowed from the
//! caller's store and never copied; [`Tape::backward`] returns gradients for
//! every parameter the pass touched.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Vec<(Var, usize)>),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a.view(),
            (None, Op::Param(pid)) => self.params[*pid].view(),
            _ => unreachable!("node without value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to parameter `pid` of the borrowed store.
    pub fn param(&mut self, pid: usize) -> Var {
        if let Some(v) = self.param_vars.get(&pid) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(pid),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(pid, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = &self.value(a) + &self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = &self.value(a) + &self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).mapv(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a).to_owned());
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &(&xhat * &self.value(gamma)) + &self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p)).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Builds a matrix whose row `r` is row `sources[r].1` of node `sources[r].0`.
    pub fn gather_rows(&mut self, sources: &[(Var, usize)]) -> Var {
        let cols = self.value(sources[0].0).ncols();
        let mut out = Array2::zeros((sources.len(), cols));
        for (r, (v, i)) in sources.iter().enumerate() {
            out.row_mut(r).assign(&self.value(*v).row(*i));
        }
        self.push(out, Op::Gather(sources.to_vec()))
    }

    /// Scales each row to unit L2 norm; an all-zero row is first offset by 1e-12.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let mut n = row.dot(&row).sqrt();
            if n == 0.0 {
                row.fill(1e-12);
                n = row.dot(&row).sqrt();
            }
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(out, Op::L2NormalizeRows { x: a, norms })
    }

    /// Propagates `seeds` (d loss / d node) back through the tape and returns
    /// gradients for every parameter leaf, keyed by parameter id.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Vec<(usize, Array2<f64>)> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            accumulate(&mut grads, *v, g.view(), || self.value(*v).dim());
            last = last.max(v.0);
        }
        let mut out = Vec::new();
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let dim = |v: Var| self.value(v).dim();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Param(pid) => out.push((*pid, g)),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga.view(), || dim(*a));
                    accumulate(&mut grads, *b, gb.view(), || dim(*b));
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(&self.value(*b));
                    let gb = g.t().dot(&self.value(*a));
                    accumulate(&mut grads, *a, ga.view(), || dim(*a));
                    accumulate(&mut grads, *b, gb.view(), || dim(*b));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.view(), || dim(*a));
                    accumulate(&mut grads, *b, g.view(), || dim(*b));
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.view(), || dim(*a));
                    accumulate(&mut grads, *row, gr.view(), || dim(*row));
                }
                Op::Scale(a, s) => {
                    let ga = g.mapv(|v| v * s);
                    accumulate(&mut grads, *a, ga.view(), || dim(*a));
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.value(*a))
                        .for_each(|gv, &x| *gv *= gelu_grad(x));
                    accumulate(&mut grads, *a, ga.view(), || dim(*a));
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let mut ga = &g * &y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let s = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|r, &yv| *r -= yv * s);
                    }
                    accumulate(&mut grads, *a, ga.view(), || dim(*a));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gamma_v = self.value(*gamma);
                    let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &gamma_v;
                    let d = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dh.sum() / d;
                        let m2 = dh.dot(&xh) / d;
                        let mut out_row = gx.row_mut(r);
                        for c in 0..xhat.ncols() {
                            out_row[c] = rstd[r] * (dh[c] - m1 - xh[c] * m2);
                        }
                    }
                    accumulate(&mut grads, *x, gx.view(), || dim(*x));
                    accumulate(&mut grads, *gamma, gg.view(), || dim(*gamma));
                    accumulate(&mut grads, *beta, gb.view(), || dim(*beta));
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = dim(*a);
                    let entry = grads[a.0].get_or_insert_with(|| Array2::zeros((r, c)));
                    let mut sl = entry.slice_mut(s![.., *start..*start + g.ncols()]);
                    sl += &g;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = dim(*p).1;
                        let gp = g.slice(s![.., offset..offset + w]);
                        accumulate(&mut grads, *p, gp, || dim(*p));
                        offset += w;
                    }
                }
                Op::Gather(sources) => {
                    for (r, (v, i)) in sources.iter().enumerate() {
                        let d = dim(*v);
                        let entry = grads[v.0].get_or_insert_with(|| Array2::zeros(d));
                        let mut dst = entry.row_mut(*i);
                        dst += &g.row(r);
                    }
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = self.value(Var(idx));
                    let mut gx = g.clone();
                    for r in 0..gx.nrows() {
                        let proj = y.row(r).dot(&g.row(r));
                        let mut row = gx.row_mut(r);
                        Zip::from(&mut row)
                            .and(&y.row(r))
                            .for_each(|gv, &yv| *gv = (*gv - yv * proj) / norms[r]);
                    }
                    accumulate(&mut grads, *x, gx.view(), || dim(*x));
                }
            }
        }
        out
    }
}

fn accumulate<F>(grads: &mut [Option<Array2<f64>>], v: Var, g: ArrayView2<f64>, shape: F)
where
    F: FnOnce() -> (usize, usize),
{
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => {
            debug_assert_eq!(g.dim(), shape());
            *slot = Some(g.to_owned());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random(r: usize, c: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(sum(W ⊙ f(params)))/dparams against central differences.
    fn check<F>(params: Vec<Array2<f64>>, build: F)
    where
        F: Fn(&mut Tape) -> Var,
    {
        let mut rng = seed::rng(42);
        let (probe, out_dim) = {
            let mut t = Tape::new(&params);
            let out = build(&mut t);
            let d = t.value(out).dim();
            (random(d.0, d.1, &mut rng), d)
        };
        let objective = |ps: &[Array2<f64>]| {
            let mut t = Tape::new(ps);
            let out = build(&mut t);
            (&t.value(out) * &probe).sum()
        };
        let mut t = Tape::new(&params);
        let out = build(&mut t);
        assert_eq!(t.value(out).dim(), out_dim);
        let grads = t.backward(&[(out, probe.clone())]);
        let h = 1e-5;
        for (pid, g) in grads {
            for ((r, c), gv) in g.indexed_iter() {
                let mut plus = params.clone();
                plus[pid][[r, c]] += h;
                let mut minus = params.clone();
                minus[pid][[r, c]] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let err = (fd - gv).abs() / fd.abs().max(gv.abs()).max(1e-6);
                assert!(err < 1e-6, "param {pid} [{r},{c}]: analytic {gv} fd {fd}");
            }
        }
    }

    #[test]
    fn matmul_family() {
        let mut rng = seed::rng(1);
        let params = vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(5, 4, &mut rng)];
        check(params, |t| {
            let a = t.param(0);
            let b = t.param(1);
            let c = t.param(2);
            let ab = t.matmul(a, b);
            let act = t.matmul_t(a, c);
            let g = t.gelu(act);
            let sc = t.scale(ab, 0.7);
            t.concat_cols(&[sc, g])
        });
    }

    #[test]
    fn norm_softmax_and_rows() {
        let mut rng = seed::rng(2);
        let params = vec![
            random(4, 6, &mut rng),
            random(1, 6, &mut rng),
            random(1, 6, &mut rng),
            random(2, 6, &mut rng),
        ];
        check(params, |t| {
            let x = t.param(0);
            let g = t.param(1);
            let b = t.param(2);
            let extra = t.param(3);
            let ln = t.layer_norm(x, g, b);
            let rows = t.gather_rows(&[(ln, 2), (extra, 1), (ln, 0), (ln, 2)]);
            let added = t.add_row(rows, b);
            let sm = t.softmax_rows(added);
            let sl = t.slice_cols(sm, 1, 3);
            let nrm = t.l2_normalize_rows(added);
            let sl2 = t.slice_cols(nrm, 0, 3);
            t.add(sl, sl2)
        });
    }

    #[test]
    fn repeated_param_binds_once() {
        let params = vec![Array2::ones((2, 2))];
        let mut t = Tape::new(&params);
        let a = t.param(0);
        let b = t.param(0);
        assert_eq!(a, b);
        let c = t.add(a, b);
        let g = t.backward(&[(c, Array2::ones((2, 2)))]);
        assert_eq!(g.len(), 1);
        assert!(g[0].1.iter().all(|v| *v == 2.0));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = seed::rng(3);
        let params = vec![random(5, 7, &mut rng).mapv(|v| v * 30.0)];
        let mut t = Tape::new(&params);
        let x = t.param(0);
        let y = t.softmax_rows(x);
        for row in t.value(y).rows() {
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_normalizes_to_uniform_direction() {
        let params = vec![Array2::zeros((1, 4))];
        let mut t = Tape::new(&params);
        let x = t.param(0);
        let y = t.l2_normalize_rows(x);
        for v in t.value(y).iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }
}
