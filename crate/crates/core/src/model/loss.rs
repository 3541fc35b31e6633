//! Training losses: whole-body reconstruction, controlled-keypoint distance
//! and foot sliding.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, UnaryVjp};
use crate::control::AgentControl;
use crate::error::{Error, Result};
use crate::motion::repr::{relative_to_global_raw, relative_to_global_vjp};
use crate::motion::{RelativeMotion, Skeleton, UP};

/// How the control term aggregates keypoint distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConMode {
    /// Mean Euclidean distance over controlled entries.
    #[default]
    Normalized,
    /// `(sum M) * ||E - X||_F` over all entries, without masking.
    Literal,
}

impl std::str::FromStr for ConMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(ConMode::Normalized),
            "literal" => Ok(ConMode::Literal),
            other => Err(Error::validation(format!(
                "unknown loss.con_mode {other:?} (expected normalized | literal)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub whole: f64,
    pub con: f64,
    pub foot: f64,
    /// Height below which a foot counts as grounded (m).
    pub h_thresh: f64,
    pub con_mode: ConMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            whole: 1.0,
            con: 1.0,
            foot: 1.0,
            h_thresh: 0.05,
            con_mode: ConMode::Normalized,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.whole, self.con, self.foot, self.h_thresh];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("loss weights and h_thresh must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub whole: f64,
    pub con: f64,
    pub foot: f64,
    pub total: f64,
}

/// Distance between controlled targets and the global joints of a
/// relative-representation sequence.
#[derive(Clone)]
pub(crate) struct ConLoss {
    pub frames: usize,
    pub joints: usize,
    pub fps: f64,
    pub targets: Vec<f64>,
    pub mask: Vec<f64>,
    pub mode: ConMode,
}

impl ConLoss {
    pub fn new(control: &AgentControl, fps: f64, mode: ConMode) -> Self {
        ConLoss {
            frames: control.frames,
            joints: control.joints,
            fps,
            targets: control.targets.clone(),
            mask: control.mask.clone(),
            mode,
        }
    }

    /// Value and gradient with respect to the global positions.
    fn eval_positions(&self, pos: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; pos.len()];
        let count: f64 = self.mask.iter().sum();
        if count == 0.0 {
            return (0.0, grad);
        }
        match self.mode {
            ConMode::Normalized => {
                let mut total = 0.0;
                for (c, &m) in self.mask.iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    let d = diff3(&pos[3 * c..3 * c + 3], &self.targets[3 * c..3 * c + 3]);
                    let n = norm3(d);
                    total += m * n;
                    if n > 0.0 {
                        for k in 0..3 {
                            grad[3 * c + k] = m * d[k] / (n * count);
                        }
                    }
                }
                (total / count, grad)
            }
            ConMode::Literal => {
                let sq: f64 = pos.iter().zip(&self.targets).map(|(p, t)| (p - t) * (p - t)).sum();
                let n = sq.sqrt();
                if n > 0.0 {
                    for (k, g) in grad.iter_mut().enumerate() {
                        *g = count * (pos[k] - self.targets[k]) / n;
                    }
                }
                (count * n, grad)
            }
        }
    }

    pub fn value(&self, data: &[f64]) -> f64 {
        let pos = relative_to_global_raw(data, self.frames, self.joints, self.fps);
        self.eval_positions(&pos).0
    }
}

impl UnaryVjp for ConLoss {
    fn vjp(&self, input: &Tensor, _output: &Tensor, grad_out: &Tensor) -> Tensor {
        let pos = relative_to_global_raw(input.data(), self.frames, self.joints, self.fps);
        let (_, mut gp) = self.eval_positions(&pos);
        let s = grad_out.item();
        gp.iter_mut().for_each(|g| *g *= s);
        let g = relative_to_global_vjp(input.data(), self.frames, self.joints, self.fps, &gp);
        Tensor::from_vec(input.shape(), g)
    }
}

/// Mean over frame transitions of the displacement of grounded foot joints.
#[derive(Clone)]
pub(crate) struct FootLoss {
    pub frames: usize,
    pub joints: usize,
    pub fps: f64,
    pub feet: Vec<usize>,
    pub h_thresh: f64,
}

impl FootLoss {
    pub fn new(skel: &Skeleton, frames: usize, fps: f64, h_thresh: f64) -> Self {
        FootLoss {
            frames,
            joints: skel.num_joints(),
            fps,
            feet: skel.unique_foot_joints(),
            h_thresh,
        }
    }

    fn eval_positions(&self, pos: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; pos.len()];
        if self.frames < 2 {
            return (0.0, grad);
        }
        let scale = 1.0 / (self.frames - 1) as f64;
        let mut total = 0.0;
        for i in 0..self.frames - 1 {
            for &j in &self.feet {
                let a = 3 * (i * self.joints + j);
                let b = 3 * ((i + 1) * self.joints + j);
                if pos[a + UP] >= self.h_thresh {
                    continue;
                }
                let d = diff3(&pos[b..b + 3], &pos[a..a + 3]);
                let n = norm3(d);
                total += n;
                if n > 0.0 {
                    for k in 0..3 {
                        grad[b + k] += scale * d[k] / n;
                        grad[a + k] -= scale * d[k] / n;
                    }
                }
            }
        }
        (total * scale, grad)
    }

    pub fn value(&self, data: &[f64]) -> f64 {
        let pos = relative_to_global_raw(data, self.frames, self.joints, self.fps);
        self.eval_positions(&pos).0
    }
}

impl UnaryVjp for FootLoss {
    fn vjp(&self, input: &Tensor, _output: &Tensor, grad_out: &Tensor) -> Tensor {
        let pos = relative_to_global_raw(input.data(), self.frames, self.joints, self.fps);
        let (_, mut gp) = self.eval_positions(&pos);
        let s = grad_out.item();
        gp.iter_mut().for_each(|g| *g *= s);
        let g = relative_to_global_vjp(input.data(), self.frames, self.joints, self.fps, &gp);
        Tensor::from_vec(input.shape(), g)
    }
}

fn diff3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn check_pair(x0_hat: &RelativeMotion, x_gt: &RelativeMotion, control: &AgentControl, skel: &Skeleton) -> Result<()> {
    if x0_hat.frames != x_gt.frames || x0_hat.joints != x_gt.joints || x0_hat.data.len() != x_gt.data.len() {
        return Err(Error::shape(
            "loss_total",
            &[x_gt.frames, x_gt.dim()],
            &[x0_hat.frames, x0_hat.dim()],
        ));
    }
    if x0_hat.joints != skel.num_joints() || control.frames != x0_hat.frames || control.joints != x0_hat.joints {
        return Err(Error::shape(
            "loss_total control",
            &[x0_hat.frames, skel.num_joints()],
            &[control.frames, control.joints],
        ));
    }
    control.validate()
}

/// Weighted sum of the three losses and the individual parts.
///
/// The reconstruction term is the mean squared error over every channel;
/// the other two are measured on the global positions of `x0_hat`.
pub fn loss_total(
    x0_hat: &RelativeMotion,
    x_gt: &RelativeMotion,
    control: &AgentControl,
    skel: &Skeleton,
    lw: &LossWeights,
) -> Result<LossParts> {
    loss_total_with_grad(x0_hat, x_gt, control, skel, lw).map(|(p, _)| p)
}

/// [`loss_total`] plus its gradient with respect to `x0_hat`.
pub fn loss_total_with_grad(
    x0_hat: &RelativeMotion,
    x_gt: &RelativeMotion,
    control: &AgentControl,
    skel: &Skeleton,
    lw: &LossWeights,
) -> Result<(LossParts, Vec<f64>)> {
    check_pair(x0_hat, x_gt, control, skel)?;
    lw.validate()?;
    let n = x0_hat.data.len() as f64;
    let whole = x0_hat
        .data
        .iter()
        .zip(&x_gt.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let mut grad: Vec<f64> = x0_hat
        .data
        .iter()
        .zip(&x_gt.data)
        .map(|(a, b)| lw.whole * 2.0 * (a - b) / n)
        .collect();

    let (f, j, fps) = (x0_hat.frames, x0_hat.joints, x0_hat.fps);
    let pos = relative_to_global_raw(&x0_hat.data, f, j, fps);
    let (con, gc) = ConLoss::new(control, fps, lw.con_mode).eval_positions(&pos);
    let (foot, gf) = FootLoss::new(skel, f, fps, lw.h_thresh).eval_positions(&pos);
    let gp: Vec<f64> = gc.iter().zip(&gf).map(|(a, b)| lw.con * a + lw.foot * b).collect();
    let g_rel = relative_to_global_vjp(&x0_hat.data, f, j, fps, &gp);
    grad.iter_mut().zip(&g_rel).for_each(|(g, r)| *g += r);

    let total = lw.whole * whole + lw.con * con + lw.foot * foot;
    Ok((LossParts { whole, con, foot, total }, grad))
}
