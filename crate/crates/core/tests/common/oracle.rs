//! Independent reference implementation used as a finite-difference oracle.
//!
//! Everything here runs in double-double arithmetic (about 32 significant
//! digits), so a central difference with step 1e-5 is limited by truncation
//! rather than by cancellation in the two loss evaluations. The network is
//! rebuilt from plain parameter slices and shares no code with the crate.
#![allow(dead_code)]
// `!(a <= b)` comparisons deliberately treat NaN as failing.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct DD {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl DD {
    pub const ZERO: DD = DD { hi: 0.0, lo: 0.0 };
    pub const ONE: DD = DD { hi: 1.0, lo: 0.0 };
    const LN2: DD = DD {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn new(x: f64) -> DD {
        DD { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn norm(hi: f64, lo: f64) -> DD {
        let (hi, lo) = quick_two_sum(hi, lo);
        DD { hi, lo }
    }

    /// Exact multiplication by `2^k`.
    fn ldexp(self, k: i32) -> DD {
        let s = 2f64.powi(k);
        DD {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn abs(self) -> DD {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn sqrt(self) -> DD {
        if self.hi <= 0.0 {
            return DD::ZERO;
        }
        let y = DD::new(self.hi.sqrt());
        y + (self - y * y) / (y + y)
    }

    pub fn exp(self) -> DD {
        assert!(self.hi < 700.0, "exp overflow in oracle");
        if self.hi < -700.0 {
            return DD::ZERO;
        }
        let k = (self.hi / Self::LN2.hi).round();
        let r = (self - Self::LN2 * DD::new(k)).ldexp(-10);
        let mut sum = DD::ONE;
        let mut term = DD::ONE;
        for n in 1..=14 {
            term = term * r / DD::new(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }

    pub fn tanh(self) -> DD {
        let a = self.abs();
        let e = (-(a + a)).exp();
        let t = (DD::ONE - e) / (DD::ONE + e);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }

    pub fn sigmoid(self) -> DD {
        DD::ONE / (DD::ONE + (-self).exp())
    }
}

impl Neg for DD {
    type Output = DD;
    fn neg(self) -> DD {
        DD {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DD {
    type Output = DD;
    fn add(self, b: DD) -> DD {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        DD::norm(s, e + f)
    }
}

impl Sub for DD {
    type Output = DD;
    fn sub(self, b: DD) -> DD {
        self + (-b)
    }
}

impl Mul for DD {
    type Output = DD;
    fn mul(self, b: DD) -> DD {
        let (p, e) = two_prod(self.hi, b.hi);
        DD::norm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DD {
    type Output = DD;
    fn div(self, b: DD) -> DD {
        let q1 = self.hi / b.hi;
        let r = self - b * DD::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * DD::new(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        DD { hi, lo } + DD::new(q3)
    }
}

pub fn dd_vec(xs: &[f64]) -> Vec<DD> {
    xs.iter().map(|&x| DD::new(x)).collect()
}

fn dot(w: &[DD], x: &[DD]) -> DD {
    w.iter().zip(x).fold(DD::ZERO, |acc, (a, b)| acc + *a * *b)
}

/// `W·x + b` with `W` stored row-major as `b.len()` rows.
fn affine(w: &[DD], b: &[DD], x: &[DD]) -> Vec<DD> {
    let cols = x.len();
    assert_eq!(w.len(), b.len() * cols);
    (0..b.len())
        .map(|r| dot(&w[r * cols..(r + 1) * cols], x) + b[r])
        .collect()
}

/// One LSTM step with gates stacked as input, forget, output, candidate and
/// the cell reading `[x; h_prev]`.
pub fn lstm_step(w: &[DD], b: &[DD], x: &[DD], h: &[DD], c: &[DD]) -> (Vec<DD>, Vec<DD>) {
    let n = h.len();
    let input: Vec<DD> = x.iter().chain(h).copied().collect();
    let z = affine(w, b, &input);
    let mut h_new = Vec::with_capacity(n);
    let mut c_new = Vec::with_capacity(n);
    for j in 0..n {
        let i = z[j].sigmoid();
        let f = z[n + j].sigmoid();
        let o = z[2 * n + j].sigmoid();
        let g = z[3 * n + j].tanh();
        let cj = f * c[j] + i * g;
        c_new.push(cj);
        h_new.push(o * cj.tanh());
    }
    (h_new, c_new)
}

/// Two leaky-ReLU layers and a linear output. `theta` holds
/// `w1, b1, w2, b2, w3, b3`. Signs of the hidden pre-activations are
/// appended to `kinks`.
pub fn head(
    theta: &[DD],
    sizes: [usize; 4],
    slope: f64,
    input: &[DD],
    kinks: &mut Vec<bool>,
) -> Vec<DD> {
    let [d_in, h1, h2, d_out] = sizes;
    assert_eq!(input.len(), d_in);
    let mut off = 0;
    let mut take = |n: usize| {
        let s = &theta[off..off + n];
        off += n;
        s
    };
    let (w1, b1) = (take(h1 * d_in), take(h1));
    let (w2, b2) = (take(h2 * h1), take(h2));
    let (w3, b3) = (take(d_out * h2), take(d_out));
    let leaky = |z: Vec<DD>, kinks: &mut Vec<bool>| -> Vec<DD> {
        z.into_iter()
            .map(|v| {
                kinks.push(v.hi >= 0.0);
                if v.hi >= 0.0 {
                    v
                } else {
                    v * DD::new(slope)
                }
            })
            .collect()
    };
    let a1 = leaky(affine(w1, b1, input), kinks);
    let a2 = leaky(affine(w2, b2, &a1), kinks);
    affine(w3, b3, &a2)
}

pub fn head_param_count(sizes: [usize; 4]) -> usize {
    let [d_in, h1, h2, d_out] = sizes;
    h1 * (d_in + 1) + h2 * (h1 + 1) + d_out * (h2 + 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Feed {
    Input,
    Below,
    StridedSum,
}

#[derive(Debug, Clone, Copy)]
struct Level {
    /// Number of weight-shared sequences.
    phases: usize,
    /// Steps between two updates of one sequence.
    period: usize,
    feed: Feed,
    /// Rotating phases (every step updates one) versus a single sequence
    /// that updates on the last step of each period.
    rotating: bool,
}

/// Architecture description, using the same variant names as the CLI.
#[derive(Debug, Clone)]
pub struct RefNet {
    pub variant: String,
    pub k: usize,
    pub levels: usize,
    pub dim: usize,
    pub hidden: usize,
    pub head1: usize,
    pub head2: usize,
    pub slope: f64,
}

impl RefNet {
    fn wiring(&self) -> Vec<Level> {
        let first = Level {
            phases: 1,
            period: 1,
            feed: Feed::Input,
            rotating: true,
        };
        let k = self.k;
        let mut out = vec![first];
        match self.variant.as_str() {
            "single_layer_pose" | "single_layer_vel" => {}
            "stacked2_vel" => out.push(Level {
                feed: Feed::Below,
                ..first
            }),
            "double_scale_vel" => out.push(Level {
                phases: 1,
                period: k,
                feed: Feed::StridedSum,
                rotating: false,
            }),
            "double_scale_hier_vel" => out.push(Level {
                phases: 1,
                period: k,
                feed: Feed::Below,
                rotating: false,
            }),
            "double_scale_phase_vel" => out.push(Level {
                phases: k,
                period: k,
                feed: Feed::StridedSum,
                rotating: true,
            }),
            "tprnn" => {
                for m in 1..self.levels {
                    let p = k.pow(m as u32);
                    out.push(Level {
                        phases: p,
                        period: p,
                        feed: Feed::Below,
                        rotating: true,
                    });
                }
            }
            other => panic!("unknown variant {other}"),
        }
        out
    }

    fn cell_inputs(&self) -> Vec<usize> {
        self.wiring()
            .iter()
            .map(|l| {
                if l.feed == Feed::Below {
                    self.hidden
                } else {
                    self.dim
                }
            })
            .collect()
    }

    fn head_sizes(&self) -> [usize; 4] {
        [
            self.dim + self.wiring().len() * self.hidden,
            self.head1,
            self.head2,
            self.dim,
        ]
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden;
        self.cell_inputs()
            .iter()
            .map(|d| 4 * h * (d + h) + 4 * h)
            .sum::<usize>()
            + head_param_count(self.head_sizes())
    }

    /// Predicted velocities for the `n_forecast` future frames, plus the sign
    /// of every leaky-ReLU pre-activation evaluated on the way.
    pub fn rollout(
        &self,
        theta: &[DD],
        seed_velocities: &[Vec<f64>],
        origin: &[f64],
        n_forecast: usize,
    ) -> (Vec<Vec<DD>>, Vec<bool>) {
        assert_eq!(theta.len(), self.param_count());
        let wiring = self.wiring();
        let h = self.hidden;
        let mut off = 0;
        let mut cells = Vec::new();
        for d in self.cell_inputs() {
            let w = &theta[off..off + 4 * h * (d + h)];
            off += w.len();
            let b = &theta[off..off + 4 * h];
            off += b.len();
            cells.push((w, b));
        }
        let head_theta = &theta[off..];
        let pose_input = self.variant == "single_layer_pose";

        let mut inputs: Vec<Vec<DD>> = Vec::new();
        if pose_input {
            let mut p = dd_vec(origin);
            for v in seed_velocities {
                for (a, b) in p.iter_mut().zip(v) {
                    *a = *a + DD::new(*b);
                }
                inputs.push(p.clone());
            }
        } else {
            inputs = seed_velocities.iter().map(|v| dd_vec(v)).collect();
        }
        let n_seed = inputs.len();
        let total = n_seed + n_forecast - 1;

        let zero = vec![DD::ZERO; h];
        let mut state: Vec<Vec<(Vec<DD>, Vec<DD>)>> = wiring
            .iter()
            .map(|l| vec![(zero.clone(), zero.clone()); l.phases])
            .collect();
        let mut kinks = Vec::new();
        let mut fed: Vec<Vec<DD>> = Vec::new();
        let mut preds: Vec<Vec<DD>> = Vec::new();
        for t in 0..total {
            let x = if t < n_seed {
                inputs[t].clone()
            } else if pose_input {
                fed[t - 1]
                    .iter()
                    .zip(&preds[t - 1])
                    .map(|(a, b)| *a + *b)
                    .collect()
            } else {
                preds[t - 1].clone()
            };
            fed.push(x.clone());
            let mut visible: Vec<usize> = Vec::new();
            for (m, lvl) in wiring.iter().enumerate() {
                let (runs, phase) = if lvl.rotating {
                    (true, t % lvl.period)
                } else {
                    ((t + 1) % lvl.period == 0, 0)
                };
                if runs {
                    let input = match lvl.feed {
                        Feed::Input => x.clone(),
                        Feed::Below => state[m - 1][visible[m - 1]].0.clone(),
                        Feed::StridedSum => {
                            let from = (t + 1).saturating_sub(self.k);
                            let mut s = vec![DD::ZERO; self.dim];
                            for past in &fed[from..=t] {
                                for (a, b) in s.iter_mut().zip(past) {
                                    *a = *a + *b;
                                }
                            }
                            s
                        }
                    };
                    let (w, b) = cells[m];
                    let (hp, cp) = &state[m][phase];
                    let next = lstm_step(w, b, &input, hp, cp);
                    state[m][phase] = next;
                }
                visible.push(phase);
            }
            let mut head_in = x.clone();
            for (m, &q) in visible.iter().enumerate() {
                head_in.extend_from_slice(&state[m][q].0);
            }
            preds.push(head(
                head_theta,
                self.head_sizes(),
                self.slope,
                &head_in,
                &mut kinks,
            ));
        }
        (preds[n_seed - 1..].to_vec(), kinks)
    }
}

/// Mean Euclidean distance between the integrated forecast and the target
/// poses, starting from the last observed pose.
pub fn pose_loss(last: &[f64], preds: &[Vec<DD>], target: &[Vec<f64>]) -> DD {
    let mut pose = dd_vec(last);
    let mut total = DD::ZERO;
    for (p, t) in preds.iter().zip(target) {
        let mut sq = DD::ZERO;
        for ((x, v), y) in pose.iter_mut().zip(p).zip(t) {
            *x = *x + *v;
            let e = *x - DD::new(*y);
            sq = sq + e * e;
        }
        total = total + sq.sqrt();
    }
    total / DD::new(target.len() as f64)
}

/// Mean Euclidean distance between forecast and true velocities.
pub fn velocity_loss(last: &[f64], preds: &[Vec<DD>], target: &[Vec<f64>]) -> DD {
    let mut prev = dd_vec(last);
    let mut total = DD::ZERO;
    for (p, t) in preds.iter().zip(target) {
        let mut sq = DD::ZERO;
        for ((v, y), q) in p.iter().zip(t).zip(prev.iter_mut()) {
            let e = *v - (DD::new(*y) - *q);
            sq = sq + e * e;
            *q = DD::new(*y);
        }
        total = total + sq.sqrt();
    }
    total / DD::new(target.len() as f64)
}

/// Central differences `(f(θ+εeᵢ) − f(θ−εeᵢ)) / 2ε` for every coordinate.
/// `f` also reports activation-kink signs; a coordinate whose two
/// evaluations disagree on any sign straddles a kink and yields `None`.
pub fn central_differences<F>(f: F, theta: &[f64], eps: f64) -> Vec<Option<f64>>
where
    F: Fn(&[DD]) -> (DD, Vec<bool>),
{
    let base = dd_vec(theta);
    let step = DD::new(eps);
    (0..theta.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + step;
            let (hi, k_hi) = f(&p);
            p[i] = base[i] - step;
            let (lo, k_lo) = f(&p);
            (k_hi == k_lo).then(|| ((hi - lo) / (step + step)).to_f64())
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error over coordinates that do not straddle a kink,
/// the index where it occurs, and how many coordinates were skipped.
pub fn compare(analytic: &[f64], numeric: &[Option<f64>]) -> (f64, usize, usize) {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = (0.0, 0);
    let mut skipped = 0;
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        match n {
            Some(n) => {
                let r = rel_error(*a, *n);
                if !(r <= worst.0) {
                    worst = (r, i);
                }
            }
            None => skipped += 1,
        }
    }
    (worst.0, worst.1, skipped)
}

#[cfg(test)]
mod dd_tests {
    #[allow(unused_imports)]
    use super::*;

    #[test]
    fn arithmetic_beats_f64() {
        // 1/3 to 32 digits
        let third = DD::ONE / DD::new(3.0);
        let back = third * DD::new(3.0) - DD::ONE;
        assert!(back.to_f64().abs() < 1e-30);
        let two = DD::new(2.0).sqrt();
        assert!((two * two - DD::new(2.0)).to_f64().abs() < 1e-30);
    }

    #[test]
    fn transcendental_accuracy() {
        for &x in &[-3.7, -0.5, -1e-3, 0.0, 2e-4, 0.3, 1.0, 5.5, 20.0] {
            let e = DD::new(x).exp();
            assert!((e.to_f64() - x.exp()).abs() <= 4e-16 * x.exp());
            // exp(x)·exp(−x) = 1 to double-double accuracy
            let prod = e * DD::new(-x).exp() - DD::ONE;
            assert!(prod.to_f64().abs() < 1e-27, "{x} {:e}", prod.to_f64());
            assert!((DD::new(x).tanh().to_f64() - x.tanh()).abs() < 4e-16);
            assert!((DD::new(x).sigmoid().to_f64() - 1.0 / (1.0 + (-x).exp())).abs() < 4e-16);
        }
    }
}
