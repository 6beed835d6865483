//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every differentiable operation is a method on [`Tape`]. Operations whose
//! inputs are all constants fold to a constant and record nothing; otherwise
//! a node with a backward closure is appended, so the tape is topologically
//! ordered by construction. [`Tape::backward`] walks the nodes once in
//! reverse, accumulating gradients additively across fan-out in a fixed
//! order, which makes gradients bit-reproducible.

use std::cell::RefCell;
use std::rc::Rc;

use super::value::Value;

/// Handle to a dense tensor, optionally attached to a tape node.
#[derive(Debug, Clone)]
pub struct Tensor {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    node: Option<usize>,
}

impl Tensor {
    /// Constant tensor: participates in computations, receives no gradient.
    pub fn constant(value: Value) -> Tensor {
        let (shape, data) = value.into_parts();
        Tensor {
            data: Rc::new(data),
            shape,
            node: None,
        }
    }

    pub fn constant_scalar(x: f64) -> Tensor {
        Tensor::constant(Value::scalar(x))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn value(&self) -> Value {
        Value::new(self.shape.clone(), self.data.to_vec())
    }

    /// Element of a rank-2 tensor at (row, col).
    pub fn at(&self, i: usize, j: usize) -> f64 {
        assert_eq!(self.shape.len(), 2, "at() needs a rank-2 tensor, got {:?}", self.shape);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Scalar contents of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() needs one element, shape {:?}", self.shape);
        self.data[0]
    }
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<usize>,
    backward: BackwardFn,
}

/// Recorded gradients, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `t`, if `t` is tracked
    /// and reachable.
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        t.node.and_then(|id| self.grads.get(id).and_then(|g| g.as_deref()))
    }
}

/// Flat record of differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => {
            debug_assert_eq!(acc.len(), g.len());
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf: gradients will be recorded for it.
    pub fn var(&self, value: &Value) -> Tensor {
        let id = self.push(Vec::new(), Box::new(|_| Vec::new()));
        Tensor {
            data: Rc::new(value.data().to_vec()),
            shape: value.shape().to_vec(),
            node: Some(id),
        }
    }

    fn push(&self, parents: Vec<usize>, backward: BackwardFn) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { parents, backward });
        nodes.len() - 1
    }

    fn make(&self, shape: Vec<usize>, data: Vec<f64>, parents: Vec<usize>, backward: BackwardFn) -> Tensor {
        debug_assert!(
            data.iter().all(|x| x.is_finite()),
            "non-finite value produced by a tape operation"
        );
        let node = if parents.is_empty() {
            None
        } else {
            Some(self.push(parents, backward))
        };
        Tensor {
            data: Rc::new(data),
            shape,
            node,
        }
    }

    /// Reverse pass from a scalar root. Visits each node at most once, in
    /// reverse topological order.
    pub fn backward(&self, root: &Tensor) -> Gradients {
        assert_eq!(
            root.numel(),
            1,
            "backward root must be scalar, shape {:?}",
            root.shape()
        );
        let root_id = root.node.expect("backward root is not on the tape");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root_id] = Some(vec![1.0]);
        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.parents.is_empty() {
                let parent_grads = (node.backward)(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    accumulate(&mut grads[pid], pg);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "add: shape {:?} vs {:?}", a.shape, b.shape);
        let out = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tb = track(&mut parents, b);
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    r.push(g.to_vec());
                }
                if tb {
                    r.push(g.to_vec());
                }
                r
            }),
        )
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "sub: shape {:?} vs {:?}", a.shape, b.shape);
        let out = a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tb = track(&mut parents, b);
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    r.push(g.to_vec());
                }
                if tb {
                    r.push(g.iter().map(|x| -x).collect());
                }
                r
            }),
        )
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "mul: shape {:?} vs {:?}", a.shape, b.shape);
        let out = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tb = track(&mut parents, b);
        let ad = a.data.clone();
        let bd = b.data.clone();
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    r.push(g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect());
                }
                if tb {
                    r.push(g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect());
                }
                r
            }),
        )
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.shape, b.shape, "div: shape {:?} vs {:?}", a.shape, b.shape);
        let out = a.data.iter().zip(b.data.iter()).map(|(x, y)| x / y).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tb = track(&mut parents, b);
        let ad = a.data.clone();
        let bd = b.data.clone();
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    r.push(g.iter().zip(bd.iter()).map(|(g, y)| g / y).collect());
                }
                if tb {
                    r.push(
                        g.iter()
                            .zip(ad.iter().zip(bd.iter()))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    );
                }
                r
            }),
        )
    }

    /// Elementwise `a / max(b, floor)`; no gradient flows into `b` where the
    /// floor is active.
    pub fn div_floor(&self, a: &Tensor, b: &Tensor, floor: f64) -> Tensor {
        assert_eq!(a.shape, b.shape, "div_floor: shape {:?} vs {:?}", a.shape, b.shape);
        let out = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(x, y)| x / y.max(floor))
            .collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tb = track(&mut parents, b);
        let ad = a.data.clone();
        let bd = b.data.clone();
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    r.push(g.iter().zip(bd.iter()).map(|(g, y)| g / y.max(floor)).collect());
                }
                if tb {
                    r.push(
                        g.iter()
                            .zip(ad.iter().zip(bd.iter()))
                            .map(|(g, (x, y))| if *y > floor { -g * x / (y * y) } else { 0.0 })
                            .collect(),
                    );
                }
                r
            }),
        )
    }

    pub fn neg(&self, a: &Tensor) -> Tensor {
        let out = a.data.iter().map(|x| -x).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| if ta { vec![g.iter().map(|x| -x).collect()] } else { vec![] }),
        )
    }

    pub fn exp(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = a.data.iter().map(|x| x.exp()).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let saved = Rc::new(out.clone());
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                if ta {
                    vec![g.iter().zip(saved.iter()).map(|(g, y)| g * y).collect()]
                } else {
                    vec![]
                }
            }),
        )
    }

    /// `ln(max(a, floor))`; gradient is zero where the floor is active.
    pub fn ln_clamped(&self, a: &Tensor, floor: f64) -> Tensor {
        assert!(floor > 0.0, "ln_clamped floor must be positive, got {floor}");
        let out = a.data.iter().map(|x| x.max(floor).ln()).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let ad = a.data.clone();
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                if ta {
                    vec![g
                        .iter()
                        .zip(ad.iter())
                        .map(|(g, x)| if *x > floor { g / x } else { 0.0 })
                        .collect()]
                } else {
                    vec![]
                }
            }),
        )
    }

    pub fn abs(&self, a: &Tensor) -> Tensor {
        let out = a.data.iter().map(|x| x.abs()).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let ad = a.data.clone();
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                if ta {
                    vec![g
                        .iter()
                        .zip(ad.iter())
                        .map(|(g, x)| g * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 })
                        .collect()]
                } else {
                    vec![]
                }
            }),
        )
    }

    /// Elementwise `max(x, slope * x)`.
    pub fn leaky_relu(&self, a: &Tensor, slope: f64) -> Tensor {
        assert!(
            slope > 0.0 && slope < 1.0,
            "leaky_relu slope must lie in (0,1), got {slope}"
        );
        let out = a.data.iter().map(|&x| if x >= 0.0 { x } else { slope * x }).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let ad = a.data.clone();
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                if ta {
                    vec![g
                        .iter()
                        .zip(ad.iter())
                        .map(|(g, x)| g * if *x >= 0.0 { 1.0 } else { slope })
                        .collect()]
                } else {
                    vec![]
                }
            }),
        )
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        let out = a.data.iter().map(|x| c * x).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| if ta { vec![g.iter().map(|x| c * x).collect()] } else { vec![] }),
        )
    }

    pub fn add_const(&self, a: &Tensor, c: f64) -> Tensor {
        let out = a.data.iter().map(|x| c + x).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| if ta { vec![g.to_vec()] } else { vec![] }),
        )
    }

    // ---- broadcasts with a one-element tensor -----------------------------

    /// `a * s` where `s` has one element.
    pub fn mul_s(&self, a: &Tensor, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "mul_s scalar operand has shape {:?}", s.shape);
        let sv = s.data[0];
        let out = a.data.iter().map(|x| x * sv).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let ts = track(&mut parents, s);
        let ad = a.data.clone();
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    r.push(g.iter().map(|g| g * sv).collect());
                }
                if ts {
                    r.push(vec![g.iter().zip(ad.iter()).map(|(g, x)| g * x).sum()]);
                }
                r
            }),
        )
    }

    /// `a / s` where `s` has one element.
    pub fn div_s(&self, a: &Tensor, s: &Tensor) -> Tensor {
        assert_eq!(s.numel(), 1, "div_s scalar operand has shape {:?}", s.shape);
        let sv = s.data[0];
        let out = a.data.iter().map(|x| x / sv).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let ts = track(&mut parents, s);
        let ad = a.data.clone();
        self.make(
            a.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    r.push(g.iter().map(|g| g / sv).collect());
                }
                if ts {
                    let acc: f64 = g.iter().zip(ad.iter()).map(|(g, x)| g * x).sum();
                    r.push(vec![-acc / (sv * sv)]);
                }
                r
            }),
        )
    }

    // ---- reductions and structure ------------------------------------------

    pub fn sum(&self, a: &Tensor) -> Tensor {
        let total: f64 = a.data.iter().sum();
        let n = a.numel();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        self.make(
            vec![1],
            vec![total],
            parents,
            Box::new(move |g| if ta { vec![vec![g[0]; n]] } else { vec![] }),
        )
    }

    /// Row sums of an `n x c` matrix, returned as `n x 1`.
    pub fn row_sums(&self, a: &Tensor) -> Tensor {
        let (n, c) = mat_dims(a, "row_sums");
        let out = (0..n).map(|i| a.data[i * c..(i + 1) * c].iter().sum()).collect();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        self.make(
            vec![n, 1],
            out,
            parents,
            Box::new(move |g| {
                if ta {
                    let mut r = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            r[i * c + j] = g[i];
                        }
                    }
                    vec![r]
                } else {
                    vec![]
                }
            }),
        )
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            a.numel(),
            "reshape: {:?} ({} elements) to {:?} ({numel})",
            a.shape,
            a.numel(),
            shape
        );
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        self.make(
            shape,
            a.data.to_vec(),
            parents,
            Box::new(move |g| if ta { vec![g.to_vec()] } else { vec![] }),
        )
    }

    pub fn transpose(&self, a: &Tensor) -> Tensor {
        let (n, c) = mat_dims(a, "transpose");
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[j * n + i] = a.data[i * c + j];
            }
        }
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        self.make(
            vec![c, n],
            out,
            parents,
            Box::new(move |g| {
                if ta {
                    let mut r = vec![0.0; n * c];
                    for j in 0..c {
                        for i in 0..n {
                            r[i * c + j] = g[j * n + i];
                        }
                    }
                    vec![r]
                } else {
                    vec![]
                }
            }),
        )
    }

    /// `[a | b]` along columns: `n x c1`, `n x c2` -> `n x (c1+c2)`.
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (n, c1) = mat_dims(a, "concat_cols lhs");
        let (nb, c2) = mat_dims(b, "concat_cols rhs");
        assert_eq!(n, nb, "concat_cols: row counts {n} vs {nb}");
        let c = c1 + c2;
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            out.extend_from_slice(&a.data[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&b.data[i * c2..(i + 1) * c2]);
        }
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tb = track(&mut parents, b);
        self.make(
            vec![n, c],
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    let mut ga = Vec::with_capacity(n * c1);
                    for i in 0..n {
                        ga.extend_from_slice(&g[i * c..i * c + c1]);
                    }
                    r.push(ga);
                }
                if tb {
                    let mut gb = Vec::with_capacity(n * c2);
                    for i in 0..n {
                        gb.extend_from_slice(&g[i * c + c1..(i + 1) * c]);
                    }
                    r.push(gb);
                }
                r
            }),
        )
    }

    /// Rows of `a` selected by `idx`, in order.
    pub fn gather_rows(&self, a: &Tensor, idx: &[usize]) -> Tensor {
        let (n, c) = mat_dims(a, "gather_rows");
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < n, "gather_rows: index {i} out of range for {n} rows");
            out.extend_from_slice(&a.data[i * c..(i + 1) * c]);
        }
        let m = idx.len();
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let idx: Rc<Vec<usize>> = Rc::new(idx.to_vec());
        self.make(
            vec![m, c],
            out,
            parents,
            Box::new(move |g| {
                if ta {
                    let mut r = vec![0.0; n * c];
                    for (row, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            r[i * c + j] += g[row * c + j];
                        }
                    }
                    vec![r]
                } else {
                    vec![]
                }
            }),
        )
    }

    /// Adds a length-`c` bias vector to every row of an `n x c` matrix.
    pub fn add_row(&self, a: &Tensor, bias: &Tensor) -> Tensor {
        let (n, c) = mat_dims(a, "add_row");
        assert_eq!(
            bias.numel(),
            c,
            "add_row: bias length {} vs width {c}",
            bias.numel()
        );
        let mut out = a.data.to_vec();
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] += bias.data[j];
            }
        }
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tb = track(&mut parents, bias);
        self.make(
            vec![n, c],
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    r.push(g.to_vec());
                }
                if tb {
                    let mut gb = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            gb[j] += g[i * c + j];
                        }
                    }
                    r.push(gb);
                }
                r
            }),
        )
    }

    /// Scales row `i` of `a` by `v[i]` (`v` is `n x 1` or length `n`).
    pub fn mul_colvec(&self, a: &Tensor, v: &Tensor) -> Tensor {
        let (n, c) = mat_dims(a, "mul_colvec");
        assert_eq!(v.numel(), n, "mul_colvec: vector length {} vs {n} rows", v.numel());
        let mut out = a.data.to_vec();
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] *= v.data[i];
            }
        }
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tv = track(&mut parents, v);
        let ad = a.data.clone();
        let vd = v.data.clone();
        self.make(
            vec![n, c],
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    let mut ga = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            ga[i * c + j] = g[i * c + j] * vd[i];
                        }
                    }
                    r.push(ga);
                }
                if tv {
                    let mut gv = vec![0.0; n];
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g[i * c + j] * ad[i * c + j];
                        }
                        gv[i] = acc;
                    }
                    r.push(gv);
                }
                r
            }),
        )
    }

    /// Scales column `j` of `a` by `v[j]` (`v` is `c x 1` or length `c`).
    pub fn mul_rowvec(&self, a: &Tensor, v: &Tensor) -> Tensor {
        let (n, c) = mat_dims(a, "mul_rowvec");
        assert_eq!(v.numel(), c, "mul_rowvec: vector length {} vs width {c}", v.numel());
        let mut out = a.data.to_vec();
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] *= v.data[j];
            }
        }
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tv = track(&mut parents, v);
        let ad = a.data.clone();
        let vd = v.data.clone();
        self.make(
            vec![n, c],
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    let mut ga = vec![0.0; n * c];
                    for i in 0..n {
                        for j in 0..c {
                            ga[i * c + j] = g[i * c + j] * vd[j];
                        }
                    }
                    r.push(ga);
                }
                if tv {
                    let mut gv = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            gv[j] += g[i * c + j] * ad[i * c + j];
                        }
                    }
                    r.push(gv);
                }
                r
            }),
        )
    }

    /// Divides row `i` of `a` by `max(v[i], floor)`; no gradient into
    /// floored entries of `v`.
    pub fn div_colvec_floor(&self, a: &Tensor, v: &Tensor, floor: f64) -> Tensor {
        let (n, c) = mat_dims(a, "div_colvec_floor");
        assert_eq!(v.numel(), n, "div_colvec_floor: vector length {} vs {n} rows", v.numel());
        let mut out = a.data.to_vec();
        for i in 0..n {
            let d = v.data[i].max(floor);
            for j in 0..c {
                out[i * c + j] /= d;
            }
        }
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tv = track(&mut parents, v);
        let ad = a.data.clone();
        let vd = v.data.clone();
        self.make(
            vec![n, c],
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    let mut ga = vec![0.0; n * c];
                    for i in 0..n {
                        let d = vd[i].max(floor);
                        for j in 0..c {
                            ga[i * c + j] = g[i * c + j] / d;
                        }
                    }
                    r.push(ga);
                }
                if tv {
                    let mut gv = vec![0.0; n];
                    for i in 0..n {
                        if vd[i] > floor {
                            let d = vd[i];
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += g[i * c + j] * ad[i * c + j];
                            }
                            gv[i] = -acc / (d * d);
                        }
                    }
                    r.push(gv);
                }
                r
            }),
        )
    }

    // ---- linear algebra ----------------------------------------------------

    /// `(m x k) . (k x n)` matrix product.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = mat_dims(a, "matmul lhs");
        let (kb, n) = mat_dims(b, "matmul rhs");
        assert_eq!(k, kb, "matmul: inner dims {:?} vs {:?}", a.shape, b.shape);
        let mut out = vec![0.0; m * n];
        dgemm_rm(m, k, n, &a.data, false, &b.data, false, &mut out);
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tb = track(&mut parents, b);
        let ad = a.data.clone();
        let bd = b.data.clone();
        self.make(
            vec![m, n],
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ta {
                    // dA = G . B^T
                    let mut ga = vec![0.0; m * k];
                    dgemm_rm(m, n, k, g, false, &bd, true, &mut ga);
                    r.push(ga);
                }
                if tb {
                    // dB = A^T . G
                    let mut gb = vec![0.0; k * n];
                    dgemm_rm(k, m, n, &ad, true, g, false, &mut gb);
                    r.push(gb);
                }
                r
            }),
        )
    }

    /// Fused `leaky_relu(a . w + bias, slope)`. One tape node instead of
    /// three, which matters in the per-edge layers where `a` has thousands of
    /// rows. LeakyReLU preserves sign, so the backward pass gates on the sign
    /// of the output rather than storing the pre-activation.
    pub fn linear_leaky(&self, a: &Tensor, w: &Tensor, bias: &Tensor, slope: f64) -> Tensor {
        assert!(
            slope > 0.0 && slope < 1.0,
            "linear_leaky slope must lie in (0,1), got {slope}"
        );
        let (m, k) = mat_dims(a, "linear_leaky lhs");
        let (kb, n) = mat_dims(w, "linear_leaky rhs");
        assert_eq!(k, kb, "linear_leaky: inner dims {:?} vs {:?}", a.shape, w.shape);
        assert_eq!(
            bias.numel(),
            n,
            "linear_leaky: bias length {} vs width {n}",
            bias.numel()
        );
        let mut out = vec![0.0; m * n];
        dgemm_rm(m, k, n, &a.data, false, &w.data, false, &mut out);
        for i in 0..m {
            for j in 0..n {
                let x = out[i * n + j] + bias.data[j];
                out[i * n + j] = if x >= 0.0 { x } else { slope * x };
            }
        }
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let tw = track(&mut parents, w);
        let tb = track(&mut parents, bias);
        let ad = a.data.clone();
        let wd = w.data.clone();
        let od = out.clone();
        self.make(
            vec![m, n],
            out,
            parents,
            Box::new(move |g| {
                let gpre: Vec<f64> = g
                    .iter()
                    .zip(od.iter())
                    .map(|(g, o)| g * if *o >= 0.0 { 1.0 } else { slope })
                    .collect();
                let mut r = Vec::new();
                if ta {
                    let mut ga = vec![0.0; m * k];
                    dgemm_rm(m, n, k, &gpre, false, &wd, true, &mut ga);
                    r.push(ga);
                }
                if tw {
                    let mut gw = vec![0.0; k * n];
                    dgemm_rm(k, m, n, &ad, true, &gpre, false, &mut gw);
                    r.push(gw);
                }
                if tb {
                    let mut gb = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += gpre[i * n + j];
                        }
                    }
                    r.push(gb);
                }
                r
            }),
        )
    }

    /// Rows rescaled to unit Euclidean norm; rows with norm below `1e-12`
    /// become zero (and receive zero gradient). Rank-1 input is treated as a
    /// single row.
    pub fn l2_normalize_rows(&self, a: &Tensor) -> Tensor {
        const NORM_FLOOR: f64 = 1e-12;
        let (n, c) = if a.shape.len() == 1 {
            (1, a.shape[0])
        } else {
            mat_dims(a, "l2_normalize_rows")
        };
        let mut out = vec![0.0; n * c];
        let mut norms = vec![0.0; n];
        for i in 0..n {
            let row = &a.data[i * c..(i + 1) * c];
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[i] = nrm;
            if nrm > NORM_FLOOR {
                for j in 0..c {
                    out[i * c + j] = row[j] / nrm;
                }
            }
        }
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let saved = Rc::new(out.clone());
        let norms = Rc::new(norms);
        let shape = a.shape.clone();
        self.make(
            shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                if ta {
                    let mut r = vec![0.0; n * c];
                    for i in 0..n {
                        let nrm = norms[i];
                        if nrm > NORM_FLOOR {
                            let y = &saved[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                            for j in 0..c {
                                r[i * c + j] = (gr[j] - y[j] * dot) / nrm;
                            }
                        }
                    }
                    vec![r]
                } else {
                    vec![]
                }
            }),
        )
    }

    /// Max over each consecutive group of `k` rows, per column. Ties route
    /// the gradient to the lowest row of the group.
    pub fn max_pool_rows(&self, a: &Tensor, k: usize) -> Tensor {
        let (nk, c) = mat_dims(a, "max_pool_rows");
        assert!(k > 0 && nk % k == 0, "max_pool_rows: {nk} rows not divisible by group {k}");
        let n = nk / k;
        let mut out = vec![0.0; n * c];
        let mut arg = vec![0usize; n * c];
        for i in 0..n {
            for j in 0..c {
                let mut best = a.data[(i * k) * c + j];
                let mut best_row = i * k;
                for r in 1..k {
                    let v = a.data[(i * k + r) * c + j];
                    if v > best {
                        best = v;
                        best_row = i * k + r;
                    }
                }
                out[i * c + j] = best;
                arg[i * c + j] = best_row;
            }
        }
        let mut parents = Vec::new();
        let ta = track(&mut parents, a);
        let arg = Rc::new(arg);
        self.make(
            vec![n, c],
            out,
            parents,
            Box::new(move |g| {
                if ta {
                    let mut r = vec![0.0; nk * c];
                    for i in 0..n {
                        for j in 0..c {
                            r[arg[i * c + j] * c + j] += g[i * c + j];
                        }
                    }
                    vec![r]
                } else {
                    vec![]
                }
            }),
        )
    }

    // ---- image operators -----------------------------------------------------

    /// Stride-2 cross-correlation with zero padding `(k-1)/2`.
    ///
    /// `input` is `H x W x C_in`, `weight` is `K x K x C_in x C_out`, `bias`
    /// has length `C_out`; the result is `ceil(H/2) x ceil(W/2) x C_out`.
    pub fn conv2d_stride2(&self, input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        assert_eq!(
            input.shape.len(),
            3,
            "conv2d input must be H x W x C, got {:?}",
            input.shape
        );
        assert_eq!(
            weight.shape.len(),
            4,
            "conv2d weight must be K x K x C_in x C_out, got {:?}",
            weight.shape
        );
        let (h, w, cin) = (input.shape[0], input.shape[1], input.shape[2]);
        let (kh, kw, wcin, cout) = (
            weight.shape[0],
            weight.shape[1],
            weight.shape[2],
            weight.shape[3],
        );
        assert_eq!(kh, kw, "conv2d kernel must be square, got {kh}x{kw}");
        assert!(kh % 2 == 1, "conv2d kernel size must be odd, got {kh}");
        assert_eq!(
            cin, wcin,
            "conv2d channel mismatch: input {:?} vs weight {:?}",
            input.shape, weight.shape
        );
        assert_eq!(bias.numel(), cout, "conv2d bias length {} vs {cout}", bias.numel());
        assert!(h >= 2 && w >= 2, "conv2d input too small: {h}x{w}");
        let ksize = kh;
        let pad = (ksize - 1) / 2;
        let ho = h.div_ceil(2);
        let wo = w.div_ceil(2);
        let patch = ksize * ksize * cin;

        // im2col, then one GEMM against the flattened kernel matrix.
        let mut cols = vec![0.0; ho * wo * patch];
        for oh in 0..ho {
            for ow in 0..wo {
                let base = (oh * wo + ow) * patch;
                for ki in 0..ksize {
                    let ih = (oh * 2 + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..ksize {
                        let iw = (ow * 2 + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let src = ((ih as usize) * w + iw as usize) * cin;
                        let dst = base + (ki * ksize + kj) * cin;
                        cols[dst..dst + cin].copy_from_slice(&input.data[src..src + cin]);
                    }
                }
            }
        }
        let mut out = vec![0.0; ho * wo * cout];
        dgemm_rm(ho * wo, patch, cout, &cols, false, &weight.data, false, &mut out);
        for px in 0..ho * wo {
            for co in 0..cout {
                out[px * cout + co] += bias.data[co];
            }
        }

        let mut parents = Vec::new();
        let ti = track(&mut parents, input);
        let tw = track(&mut parents, weight);
        let tb = track(&mut parents, bias);
        let cols = Rc::new(cols);
        let wd = weight.data.clone();
        self.make(
            vec![ho, wo, cout],
            out,
            parents,
            Box::new(move |g| {
                let mut r = Vec::new();
                if ti {
                    // gInput = col2im(G . W^T)
                    let mut gcols = vec![0.0; ho * wo * patch];
                    dgemm_rm(ho * wo, cout, patch, g, false, &wd, true, &mut gcols);
                    let mut gi = vec![0.0; h * w * cin];
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let base = (oh * wo + ow) * patch;
                            for ki in 0..ksize {
                                let ih = (oh * 2 + ki) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..ksize {
                                    let iw = (ow * 2 + kj) as isize - pad as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let dst = ((ih as usize) * w + iw as usize) * cin;
                                    let src = base + (ki * ksize + kj) * cin;
                                    for c in 0..cin {
                                        gi[dst + c] += gcols[src + c];
                                    }
                                }
                            }
                        }
                    }
                    r.push(gi);
                }
                if tw {
                    // gW = cols^T . G
                    let mut gw = vec![0.0; patch * cout];
                    dgemm_rm(patch, ho * wo, cout, &cols, true, g, false, &mut gw);
                    r.push(gw);
                }
                if tb {
                    let mut gb = vec![0.0; cout];
                    for px in 0..ho * wo {
                        for co in 0..cout {
                            gb[co] += g[px * cout + co];
                        }
                    }
                    r.push(gb);
                }
                r
            }),
        )
    }

    /// Per-channel `(x - mean) / sqrt(var + eps)` over the spatial extent of
    /// an `H x W x C` map; variance is the population (biased) estimate.
    pub fn instance_norm(&self, input: &Tensor, eps: f64) -> Tensor {
        assert_eq!(
            input.shape.len(),
            3,
            "instance_norm input must be H x W x C, got {:?}",
            input.shape
        );
        let (h, w, c) = (input.shape[0], input.shape[1], input.shape[2]);
        let m = h * w;
        assert!(m >= 1, "instance_norm needs a spatial sample");
        // a single spatial sample normalizes to zero with zero gradient
        let mut out = vec![0.0; m * c];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for px in 0..m {
                mean += input.data[px * c + ch];
            }
            mean /= m as f64;
            let mut var = 0.0;
            for px in 0..m {
                let d = input.data[px * c + ch] - mean;
                var += d * d;
            }
            var /= m as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[ch] = s;
            for px in 0..m {
                out[px * c + ch] = (input.data[px * c + ch] - mean) * s;
            }
        }
        let mut parents = Vec::new();
        let ti = track(&mut parents, input);
        let saved = Rc::new(out.clone());
        let inv_std = Rc::new(inv_std);
        self.make(
            input.shape.clone(),
            out,
            parents,
            Box::new(move |g| {
                if ti {
                    let mut r = vec![0.0; m * c];
                    for ch in 0..c {
                        let mut g_mean = 0.0;
                        let mut gy_mean = 0.0;
                        for px in 0..m {
                            g_mean += g[px * c + ch];
                            gy_mean += g[px * c + ch] * saved[px * c + ch];
                        }
                        g_mean /= m as f64;
                        gy_mean /= m as f64;
                        let s = inv_std[ch];
                        for px in 0..m {
                            let y = saved[px * c + ch];
                            r[px * c + ch] = (g[px * c + ch] - g_mean - y * gy_mean) * s;
                        }
                    }
                    vec![r]
                } else {
                    vec![]
                }
            }),
        )
    }

    /// Bilinear interpolation of an `h x w x C` map at grid-space
    /// coordinates, with border clamping; invalid points yield zeros.
    /// Coordinates are constants; gradient flows into the map only.
    pub fn bilinear_sample(&self, map: &Tensor, coords: &[(f64, f64)], valid: &[bool]) -> Tensor {
        assert_eq!(
            map.shape.len(),
            3,
            "bilinear_sample map must be h x w x C, got {:?}",
            map.shape
        );
        assert_eq!(coords.len(), valid.len(), "coords/valid length mismatch");
        let (h, w, c) = (map.shape[0], map.shape[1], map.shape[2]);
        let n = coords.len();
        let mut out = vec![0.0; n * c];
        let mut stencil = Vec::with_capacity(n);
        for (p, &(x, y)) in coords.iter().enumerate() {
            if !valid[p] {
                stencil.push(None);
                continue;
            }
            let xc = x.clamp(0.0, (w - 1) as f64);
            let yc = y.clamp(0.0, (h - 1) as f64);
            let x0 = xc.floor() as usize;
            let y0 = yc.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = xc - x0 as f64;
            let fy = yc - y0 as f64;
            let w00 = (1.0 - fx) * (1.0 - fy);
            let w01 = fx * (1.0 - fy);
            let w10 = (1.0 - fx) * fy;
            let w11 = fx * fy;
            for ch in 0..c {
                out[p * c + ch] = w00 * map.data[(y0 * w + x0) * c + ch]
                    + w01 * map.data[(y0 * w + x1) * c + ch]
                    + w10 * map.data[(y1 * w + x0) * c + ch]
                    + w11 * map.data[(y1 * w + x1) * c + ch];
            }
            stencil.push(Some(([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], [w00, w01, w10, w11])));
        }
        let mut parents = Vec::new();
        let tm = track(&mut parents, map);
        let stencil = Rc::new(stencil);
        self.make(
            vec![n, c],
            out,
            parents,
            Box::new(move |g| {
                if tm {
                    let mut r = vec![0.0; h * w * c];
                    for (p, st) in stencil.iter().enumerate() {
                        if let Some((cells, weights)) = st {
                            for ch in 0..c {
                                let gv = g[p * c + ch];
                                for (cell, wt) in cells.iter().zip(weights) {
                                    r[cell * c + ch] += gv * wt;
                                }
                            }
                        }
                    }
                    vec![r]
                } else {
                    vec![]
                }
            }),
        )
    }
}

fn track(parents: &mut Vec<usize>, t: &Tensor) -> bool {
    match t.node {
        Some(id) => {
            parents.push(id);
            true
        }
        None => false,
    }
}

fn mat_dims(t: &Tensor, ctx: &str) -> (usize, usize) {
    assert_eq!(t.shape.len(), 2, "{ctx}: expected rank 2, got shape {:?}", t.shape);
    (t.shape[0], t.shape[1])
}

/// Row-major GEMM `C = A . B` with optional logical transposes, backed by
/// `matrixmultiply`.
fn dgemm_rm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
