//! Pluggable feature extractors for the distribution metrics.
//!
//! The default extractors are handcrafted and deterministic. Scores computed
//! with them are not comparable to published numbers obtained with learned
//! text/motion encoders.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FeatureSet;
use crate::error::{Error, Result};
use crate::model::TextCondition;
use crate::motion::{first_frame, headings, GlobalMotion, Skeleton};

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, glob: &GlobalMotion, skel: &Skeleton) -> Result<Vec<f64>>;

    fn extract_all(&self, globs: &[GlobalMotion], skel: &Skeleton) -> Result<FeatureSet> {
        let rows = globs.iter().map(|g| self.extract(g, skel)).collect::<Result<Vec<_>>>()?;
        FeatureSet::from_rows(&rows, self.id())
    }
}

const SPEED_BINS: usize = 8;
const SPEED_MAX: f64 = 2.0;
const KEY_JOINTS: usize = 13;

/// 64 kinematic statistics of a motion expressed in its first-frame root
/// frame:
/// - root speed histogram (8 bins over 0..2 m/s, last bin open)
/// - root height mean and std, yaw rate mean |.| and std
/// - speed mean and std of 13 evenly spaced joints
/// - pelvis-relative height mean and forward-offset std of the same joints
#[derive(Clone, Copy, Debug, Default)]
pub struct KinematicFeatures;

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn key_joints(j: usize) -> Vec<usize> {
    (0..KEY_JOINTS)
        .map(|k| ((k * (j - 1)) as f64 / (KEY_JOINTS - 1) as f64).round() as usize)
        .collect()
}

impl FeatureExtractor for KinematicFeatures {
    fn id(&self) -> &str {
        "kinematic64-v1"
    }

    fn dim(&self) -> usize {
        SPEED_BINS + 4 + 4 * KEY_JOINTS
    }

    fn extract(&self, glob: &GlobalMotion, skel: &Skeleton) -> Result<Vec<f64>> {
        if glob.joints != skel.num_joints() {
            return Err(Error::shape("KinematicFeatures", &[skel.num_joints()], &[glob.joints]));
        }
        if glob.frames < 2 {
            return Err(Error::validation("feature extraction needs at least two frames"));
        }
        let g = first_frame(glob, skel).motion_to_local(glob);
        let f = g.frames;
        let fps = g.fps;
        let mut out = Vec::with_capacity(self.dim());

        let root_speed: Vec<f64> = (0..f - 1)
            .map(|i| {
                let (a, b) = (g.pos(i, 0), g.pos(i + 1, 0));
                (b[0] - a[0]).hypot(b[2] - a[2]) * fps
            })
            .collect();
        let mut hist = [0.0; SPEED_BINS];
        for s in &root_speed {
            let b = ((s / SPEED_MAX) * SPEED_BINS as f64).floor() as usize;
            hist[b.min(SPEED_BINS - 1)] += 1.0 / root_speed.len() as f64;
        }
        out.extend_from_slice(&hist);

        let heights: Vec<f64> = (0..f).map(|i| g.pos(i, 0)[1]).collect();
        let (hm, hs) = mean_std(&heights);
        let yaw = headings(&g, skel);
        let yaw_rate: Vec<f64> = yaw.windows(2).map(|w| (w[1] - w[0]) * fps).collect();
        let abs_rate: Vec<f64> = yaw_rate.iter().map(|r| r.abs()).collect();
        out.extend([hm, hs, mean_std(&abs_rate).0, mean_std(&yaw_rate).1]);

        let keys = key_joints(g.joints);
        for &j in &keys {
            let speeds: Vec<f64> = (0..f - 1)
                .map(|i| {
                    let (a, b) = (g.pos(i, j), g.pos(i + 1, j));
                    ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2) + (b[2] - a[2]).powi(2)).sqrt() * fps
                })
                .collect();
            let (m, s) = mean_std(&speeds);
            out.extend([m, s]);
        }
        for &j in &keys {
            let rel_h: Vec<f64> = (0..f).map(|i| g.pos(i, j)[1] - g.pos(i, 0)[1]).collect();
            let rel_z: Vec<f64> = (0..f).map(|i| g.pos(i, j)[2] - g.pos(i, 0)[2]).collect();
            out.extend([mean_std(&rel_h).0, mean_std(&rel_z).1]);
        }
        Ok(out)
    }
}

/// Seeded Gaussian random projection of text embeddings into a feature space.
#[derive(Clone, Debug)]
pub struct TextProjection {
    pub seed: u64,
    in_dim: usize,
    out_dim: usize,
    matrix: Vec<f64>,
}

impl TextProjection {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        let matrix = (0..in_dim * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect::<Vec<f64>>();
        TextProjection {
            seed,
            in_dim,
            out_dim,
            matrix,
        }
    }

    pub fn id(&self) -> String {
        format!("textproj{}x{}-seed{}", self.in_dim, self.out_dim, self.seed)
    }

    pub fn project(&self, text: &TextCondition) -> Result<Vec<f64>> {
        if text.embedding.len() != self.in_dim {
            return Err(Error::shape("TextProjection", &[self.in_dim], &[text.embedding.len()]));
        }
        let mut out = vec![0.0; self.out_dim];
        for (e, row) in text.embedding.iter().zip(self.matrix.chunks(self.out_dim)) {
            for (o, m) in out.iter_mut().zip(row) {
                *o += e * m;
            }
        }
        Ok(out)
    }

    pub fn project_all(&self, texts: &[TextCondition]) -> Result<FeatureSet> {
        let rows = texts.iter().map(|t| self.project(t)).collect::<Result<Vec<_>>>()?;
        FeatureSet::from_rows(&rows, self.id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, GaitParams, Style};
    use crate::motion::RootFrame;

    #[test]
    fn kinematic_features_are_placement_invariant() {
        let skel = Skeleton::hml22();
        let p = GaitParams {
            style: Style::Walk,
            turn_rate: 0.2,
            ..GaitParams::default()
        };
        let g = synthesize(&p, &skel).unwrap().global;
        let moved = RootFrame {
            origin: [3.0, -2.0],
            heading: 1.1,
        }
        .motion_to_world(&g);
        let ex = KinematicFeatures;
        let a = ex.extract(&g, &skel).unwrap();
        let b = ex.extract(&moved, &skel).unwrap();
        assert_eq!(a.len(), 64);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "{x} {y}");
        }
    }

    #[test]
    fn text_projection_is_seeded() {
        let t = TextCondition {
            embedding: vec![0.5; 16],
            null: false,
        };
        let a = TextProjection::new(16, 64, 3).project(&t).unwrap();
        assert_eq!(a, TextProjection::new(16, 64, 3).project(&t).unwrap());
        assert_ne!(a, TextProjection::new(16, 64, 4).project(&t).unwrap());
    }
}
