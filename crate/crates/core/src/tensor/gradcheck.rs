//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{with_accumulation, Accumulation, BnMode, BnStats, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

type Build = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

/// One differentiable op at one shape; every input is a parameter of `store`.
pub struct GradCase {
    pub op: &'static str,
    pub shape: String,
    pub store: ParamStore,
    build: Build,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub op: &'static str,
    pub shape: String,
    pub coords: usize,
    pub median_rel: f64,
    pub max_rel: f64,
}

impl GradCase {
    pub fn new(
        op: &'static str,
        shape: impl Into<String>,
        store: ParamStore,
        build: impl Fn(&mut Tape, &ParamStore) -> Result<Var> + 'static,
    ) -> Self {
        GradCase {
            op,
            shape: shape.into(),
            store,
            build: Box::new(build),
        }
    }

    /// Compares analytic gradients with central differences at up to `per_param` coordinates
    /// of every input. Relative error is `|a − n| / max(|a|, |n|, floor)`.
    pub fn check(&mut self, h: f32, per_param: usize, floor: f64, seed: u64) -> Result<GradResult> {
        with_accumulation(Accumulation::F64, || self.check_inner(h, per_param, floor, seed))
    }

    fn check_inner(&mut self, h: f32, per_param: usize, floor: f64, seed: u64) -> Result<GradResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let out = (self.build)(&mut tape, &self.store)?;
        let n = tape.value(out).numel();
        let weights: Vec<f32> = if tape.value(out).is_scalar() {
            vec![1.0]
        } else {
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        let loss = tape.weighted_sum(out, &weights)?;
        self.store.zero_grad();
        tape.backward(loss, &mut self.store)?;
        let analytic: Vec<Vec<f32>> = self.store.params().iter().map(|p| p.grad.clone()).collect();

        let eval = |store: &ParamStore| -> Result<f64> {
            let mut t = Tape::no_grad();
            let o = (self.build)(&mut t, store)?;
            Ok(t.value(o).data().iter().zip(&weights).map(|(&a, &b)| a as f64 * b as f64).sum())
        };
        let mut errs = Vec::new();
        for (pi, grad) in analytic.iter().enumerate() {
            let numel = self.store.param(ParamId(pi)).value.numel();
            let coords: Vec<usize> = if numel <= per_param {
                (0..numel).collect()
            } else {
                (0..per_param).map(|_| rng.random_range(0..numel)).collect()
            };
            for c in coords {
                let x = self.store.param(ParamId(pi)).value.data()[c];
                let (up, down) = (x + h, x - h);
                self.store.param_mut(ParamId(pi)).value.data_mut()[c] = up;
                let lp = eval(&self.store)?;
                self.store.param_mut(ParamId(pi)).value.data_mut()[c] = down;
                let lm = eval(&self.store)?;
                self.store.param_mut(ParamId(pi)).value.data_mut()[c] = x;
                let numeric = (lp - lm) / (up as f64 - down as f64);
                let a = grad[c] as f64;
                errs.push((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
            }
        }
        errs.sort_by(f64::total_cmp);
        Ok(GradResult {
            op: self.op,
            shape: self.shape.clone(),
            coords: errs.len(),
            median_rel: errs.get(errs.len() / 2).copied().unwrap_or(0.0),
            max_rel: errs.last().copied().unwrap_or(0.0),
        })
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, away_from_zero: bool) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f32 = rng.random_range(-1.0..1.0);
            if away_from_zero {
                u.signum() * (0.1 + 0.9 * u.abs())
            } else {
                u
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn store_of(inputs: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in inputs {
        s.add(*name, ParamKind::Weight, t.clone()).expect("unique names");
    }
    s
}

fn p(i: usize) -> ParamId {
    ParamId(i)
}

/// Five shapes for each differentiable op of the tape.
pub fn standard_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    for &(n, c, hw, o, k, stride, pad) in &[
        (1, 1, 4, 1, 3, 1, 1),
        (2, 3, 5, 4, 3, 1, 1),
        (2, 2, 6, 3, 3, 2, 1),
        (1, 4, 5, 2, 1, 1, 0),
        (3, 2, 7, 3, 3, 2, 0),
    ] {
        let store = store_of(&[
            ("x", random(&[n, c, hw, hw], &mut rng, false)),
            ("w", random(&[o, c, k, k], &mut rng, false)),
        ]);
        cases.push(GradCase::new(
            "conv2d",
            format!("x[{n},{c},{hw},{hw}] w[{o},{c},{k},{k}] s{stride} p{pad}"),
            store,
            move |t, s| {
                let x = t.param(s, p(0));
                let w = t.param(s, p(1));
                t.conv2d(x, w, stride, pad)
            },
        ));
    }

    for &(n, f, o) in &[(1, 1, 1), (2, 3, 4), (5, 8, 3), (4, 16, 10), (7, 5, 2)] {
        let store = store_of(&[
            ("x", random(&[n, f], &mut rng, false)),
            ("w", random(&[o, f], &mut rng, false)),
            ("b", random(&[o], &mut rng, false)),
        ]);
        cases.push(GradCase::new("linear", format!("x[{n},{f}] w[{o},{f}]"), store, |t, s| {
            let (x, w, b) = (t.param(s, p(0)), t.param(s, p(1)), t.param(s, p(2)));
            t.linear(x, w, b)
        }));
    }

    for &(n, c, hw) in &[(2, 1, 2), (3, 2, 3), (4, 3, 2), (2, 4, 4), (5, 2, 1)] {
        let store = store_of(&[
            ("x", random(&[n, c, hw, hw], &mut rng, false)),
            ("gamma", random(&[c], &mut rng, true)),
            ("beta", random(&[c], &mut rng, false)),
        ]);
        cases.push(GradCase::new("batch_norm2d", format!("x[{n},{c},{hw},{hw}]"), store, move |t, s| {
            let (x, g, b) = (t.param(s, p(0)), t.param(s, p(1)), t.param(s, p(2)));
            let mut stats = BnStats::new("bn", c);
            t.batch_norm2d(x, g, b, &mut stats, BnMode::Train)
        }));
    }

    for shape in [vec![3], vec![2, 5], vec![2, 3, 4, 4], vec![1, 1, 3, 3], vec![4, 7]] {
        let store = store_of(&[("x", random(&shape, &mut rng, true))]);
        cases.push(GradCase::new("relu", format!("{shape:?}"), store, |t, s| {
            let x = t.param(s, p(0));
            Ok(t.relu(x))
        }));
    }

    for shape in [vec![1], vec![2, 3], vec![2, 2, 3, 3], vec![5, 4], vec![1, 3, 2, 2]] {
        let store = store_of(&[("a", random(&shape, &mut rng, false)), ("b", random(&shape, &mut rng, false))]);
        cases.push(GradCase::new("add", format!("{shape:?}"), store, |t, s| {
            let (a, b) = (t.param(s, p(0)), t.param(s, p(1)));
            t.add(a, b)
        }));
    }

    for &(n, c, hw) in &[(1, 1, 1), (2, 3, 4), (3, 2, 5), (1, 5, 3), (4, 1, 2)] {
        let store = store_of(&[("x", random(&[n, c, hw, hw], &mut rng, false))]);
        cases.push(GradCase::new("global_avg_pool", format!("[{n},{c},{hw},{hw}]"), store, |t, s| {
            let x = t.param(s, p(0));
            t.global_avg_pool(x)
        }));
    }

    for (i, (shape, prob)) in [
        (vec![4], 0.5f32),
        (vec![3, 5], 0.2),
        (vec![2, 8], 0.7),
        (vec![6, 3], 0.1),
        (vec![1, 10], 0.4),
    ]
    .into_iter()
    .enumerate()
    {
        let store = store_of(&[("x", random(&shape, &mut rng, false))]);
        cases.push(GradCase::new("dropout", format!("{shape:?} p={prob}"), store, move |t, s| {
            let x = t.param(s, p(0));
            let mut mask_rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            t.dropout(x, prob, true, &mut mask_rng)
        }));
    }

    for &(n, k) in &[(1, 2), (2, 3), (3, 5), (4, 10), (2, 7)] {
        let store = store_of(&[("x", random(&[n, k], &mut rng, false))]);
        cases.push(GradCase::new("softmax", format!("[{n},{k}]"), store, |t, s| {
            let x = t.param(s, p(0));
            t.softmax(x)
        }));
    }

    for &(n, k) in &[(1, 2), (2, 3), (4, 5), (3, 10), (6, 4)] {
        let store = store_of(&[("logits", random(&[n, k], &mut rng, false))]);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        cases.push(GradCase::new("cross_entropy", format!("[{n},{k}]"), store, move |t, s| {
            let x = t.param(s, p(0));
            t.cross_entropy(x, &labels)
        }));
    }

    for &(n, k) in &[(1, 2), (2, 3), (4, 5), (3, 10), (6, 4)] {
        let store = store_of(&[("student", random(&[n, k], &mut rng, false))]);
        let teacher = random(&[n, k], &mut rng, false);
        cases.push(GradCase::new("kl_distill", format!("[{n},{k}]"), store, move |t, s| {
            let x = t.param(s, p(0));
            t.kl_distill(x, &teacher)
        }));
    }

    for shape in [vec![1], vec![3, 2], vec![2, 2, 2], vec![5], vec![2, 3, 2, 2]] {
        let store = store_of(&[("x", random(&shape, &mut rng, false))]);
        let n: usize = shape.iter().product();
        let w: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        cases.push(GradCase::new("weighted_sum", format!("{shape:?}"), store, move |t, s| {
            let x = t.param(s, p(0));
            t.weighted_sum(x, &w)
        }));
    }

    // Prefix slicing of an oversized weight, as in channel-sliced convolution.
    for &(n, c, hw, o, k, co, cc) in &[
        (1, 2, 4, 3, 3, 2, 2),
        (2, 3, 5, 4, 3, 3, 3),
        (1, 1, 3, 2, 1, 1, 1),
        (2, 2, 4, 5, 3, 5, 1),
        (1, 4, 4, 2, 3, 1, 4),
    ] {
        let store = store_of(&[
            ("x", random(&[n, cc, hw, hw], &mut rng, false)),
            ("w", random(&[o, c.max(cc), k, k], &mut rng, false)),
        ]);
        cases.push(GradCase::new(
            "param_prefix",
            format!("w[{o},{},{k},{k}] → [{co},{cc},{k},{k}]", c.max(cc)),
            store,
            move |t, s| {
                let x = t.param(s, p(0));
                let w = t.param_prefix(s, p(1), &[co, cc, k, k])?;
                t.conv2d(x, w, 1, k / 2)
            },
        ));
    }

    cases
}
