//! Relative (root-local, redundant) and global (absolute joint positions)
//! motion representations and the conversions between them.
//!
//! Per-frame relative layout, for `J` joints:
//!
//! | channels      | content                                         |
//! |---------------|-------------------------------------------------|
//! | 1             | root yaw rate (rad/s)                           |
//! | 2             | root ground velocity (x, z) in the root frame (m/s) |
//! | 1             | root height (m)                                 |
//! | 3 (J-1)       | joint positions relative to the root, root frame |
//! | 3 J           | joint velocities in the root frame (m/s)        |
//! | 6 (J-1)       | per-bone 6-D rotations (first two matrix columns) |
//! | 4             | foot contact labels                             |
//!
//! Only the first four blocks drive [`relative_to_global`]; the rest is
//! redundant and carried for the denoiser.

use serde::{Deserialize, Serialize};

use super::skeleton::{repr_dim, Skeleton, UP};
use crate::error::{Error, Result};

pub const DEFAULT_FPS: f64 = 20.0;

/// Offsets of the channel blocks inside one relative frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReprLayout {
    joints: usize,
}

impl ReprLayout {
    pub fn new(joints: usize) -> Self {
        assert!(joints >= 2, "layout needs at least two joints");
        ReprLayout { joints }
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn dim(&self) -> usize {
        repr_dim(self.joints)
    }

    pub const ROT_VEL: usize = 0;
    pub const LIN_VEL: usize = 1;
    pub const HEIGHT: usize = 3;

    /// Local position of joint `j >= 1`.
    pub fn local_pos(&self, j: usize) -> usize {
        debug_assert!(j >= 1 && j < self.joints);
        4 + 3 * (j - 1)
    }

    pub fn velocity(&self, j: usize) -> usize {
        4 + 3 * (self.joints - 1) + 3 * j
    }

    /// 6-D rotation of the bone ending at joint `j >= 1`.
    pub fn rotation(&self, j: usize) -> usize {
        debug_assert!(j >= 1 && j < self.joints);
        4 + 3 * (self.joints - 1) + 3 * self.joints + 6 * (j - 1)
    }

    pub fn contacts(&self) -> usize {
        self.dim() - 4
    }

    /// Channel indices owned by each joint, used to tokenize a frame per joint.
    ///
    /// The root owns the root channels, its own velocity and the contacts;
    /// every other joint owns its position, velocity and rotation.
    pub fn joint_channels(&self) -> Vec<Vec<usize>> {
        (0..self.joints)
            .map(|j| {
                if j == 0 {
                    let mut v = vec![0, 1, 2, 3];
                    v.extend(self.velocity(0)..self.velocity(0) + 3);
                    v.extend(self.contacts()..self.contacts() + 4);
                    v
                } else {
                    let mut v: Vec<usize> = (self.local_pos(j)..self.local_pos(j) + 3).collect();
                    v.extend(self.velocity(j)..self.velocity(j) + 3);
                    v.extend(self.rotation(j)..self.rotation(j) + 6);
                    v
                }
            })
            .collect()
    }
}

/// `frames x D` relative-representation sequence for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeMotion {
    pub frames: usize,
    pub joints: usize,
    pub fps: f64,
    pub data: Vec<f64>,
}

impl RelativeMotion {
    pub fn new(frames: usize, joints: usize, fps: f64, data: Vec<f64>) -> Result<Self> {
        let d = repr_dim(joints);
        if data.len() != frames * d {
            return Err(Error::shape("RelativeMotion", &[frames, d], &[data.len()]));
        }
        Ok(RelativeMotion { frames, joints, fps, data })
    }

    pub fn zeros(frames: usize, joints: usize, fps: f64) -> Self {
        RelativeMotion {
            frames,
            joints,
            fps,
            data: vec![0.0; frames * repr_dim(joints)],
        }
    }

    pub fn dim(&self) -> usize {
        repr_dim(self.joints)
    }

    pub fn layout(&self) -> ReprLayout {
        ReprLayout::new(self.joints)
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.data[i * d..(i + 1) * d]
    }
}

/// `frames x J x 3` absolute joint positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalMotion {
    pub frames: usize,
    pub joints: usize,
    pub fps: f64,
    pub positions: Vec<f64>,
}

impl GlobalMotion {
    pub fn new(frames: usize, joints: usize, fps: f64, positions: Vec<f64>) -> Result<Self> {
        if positions.len() != frames * joints * 3 {
            return Err(Error::shape("GlobalMotion", &[frames, joints, 3], &[positions.len()]));
        }
        if positions.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("global motion contains non-finite values"));
        }
        Ok(GlobalMotion { frames, joints, fps, positions })
    }

    pub fn pos(&self, frame: usize, joint: usize) -> [f64; 3] {
        let o = (frame * self.joints + joint) * 3;
        [self.positions[o], self.positions[o + 1], self.positions[o + 2]]
    }

    pub fn set_pos(&mut self, frame: usize, joint: usize, p: [f64; 3]) {
        let o = (frame * self.joints + joint) * 3;
        self.positions[o..o + 3].copy_from_slice(&p);
    }

    /// Largest per-joint distance to another motion of the same shape.
    pub fn max_joint_error(&self, other: &GlobalMotion) -> f64 {
        self.positions
            .chunks(3)
            .zip(other.positions.chunks(3))
            .map(|(a, b)| dist3(a, b))
            .fold(0.0, f64::max)
    }
}

/// Rigid ground-plane frame of an agent: a yaw about +Y and an XZ origin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RootFrame {
    pub origin: [f64; 2],
    pub heading: f64,
}

impl RootFrame {
    /// World point expressed in this frame.
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        rot_y(-self.heading, [p[0] - self.origin[0], p[1], p[2] - self.origin[1]])
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = rot_y(self.heading, p);
        [r[0] + self.origin[0], r[1], r[2] + self.origin[1]]
    }

    pub fn motion_to_world(&self, m: &GlobalMotion) -> GlobalMotion {
        let mut out = m.clone();
        for c in out.positions.chunks_mut(3) {
            let w = self.to_world([c[0], c[1], c[2]]);
            c.copy_from_slice(&w);
        }
        out
    }

    pub fn motion_to_local(&self, m: &GlobalMotion) -> GlobalMotion {
        let mut out = m.clone();
        for c in out.positions.chunks_mut(3) {
            let w = self.to_local([c[0], c[1], c[2]]);
            c.copy_from_slice(&w);
        }
        out
    }
}

/// Rotation about +Y by `a` radians (maps +Z towards +X).
#[inline]
pub fn rot_y(a: f64, v: [f64; 3]) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]]
}

/// Derivative of [`rot_y`] with respect to the angle.
#[inline]
fn rot_y_deriv(a: f64, v: [f64; 3]) -> [f64; 3] {
    let (s, c) = a.sin_cos();
    [-s * v[0] + c * v[2], 0.0, -c * v[0] - s * v[2]]
}

fn dist3(a: &[f64], b: &[f64]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Root yaw angle per frame from the integrated yaw rate.
fn integrate_yaw(data: &[f64], frames: usize, d: usize, fps: f64) -> Vec<f64> {
    let mut ang = vec![0.0; frames];
    for i in 1..frames {
        ang[i] = ang[i - 1] + data[(i - 1) * d + ReprLayout::ROT_VEL] / fps;
    }
    ang
}

/// Forward kinematics of the relative representation on a raw `frames x D`
/// buffer. Returns `frames x J x 3` positions.
pub(crate) fn relative_to_global_raw(data: &[f64], frames: usize, joints: usize, fps: f64) -> Vec<f64> {
    let layout = ReprLayout::new(joints);
    let d = layout.dim();
    let ang = integrate_yaw(data, frames, d, fps);
    let mut out = vec![0.0; frames * joints * 3];
    let (mut px, mut pz) = (0.0, 0.0);
    for i in 0..frames {
        let row = &data[i * d..(i + 1) * d];
        if i > 0 {
            let prev = &data[(i - 1) * d..i * d];
            let v = rot_y(ang[i - 1], [prev[1], 0.0, prev[2]]);
            px += v[0] / fps;
            pz += v[2] / fps;
        }
        let root = [px, row[ReprLayout::HEIGHT], pz];
        let base = i * joints * 3;
        out[base..base + 3].copy_from_slice(&root);
        for j in 1..joints {
            let o = layout.local_pos(j);
            let l = rot_y(ang[i], [row[o], row[o + 1], row[o + 2]]);
            let q = base + 3 * j;
            out[q] = root[0] + l[0];
            out[q + 1] = root[1] + l[1];
            out[q + 2] = root[2] + l[2];
        }
    }
    out
}

/// Vector-Jacobian product of [`relative_to_global_raw`]: maps a gradient on
/// the `frames x J x 3` positions back onto the `frames x D` relative buffer.
pub(crate) fn relative_to_global_vjp(
    data: &[f64],
    frames: usize,
    joints: usize,
    fps: f64,
    grad_pos: &[f64],
) -> Vec<f64> {
    let layout = ReprLayout::new(joints);
    let d = layout.dim();
    let ang = integrate_yaw(data, frames, d, fps);
    let mut grad = vec![0.0; frames * d];
    let mut g_ang = vec![0.0; frames];
    let mut g_root = vec![[0.0f64; 3]; frames];
    for i in 0..frames {
        let row = &data[i * d..(i + 1) * d];
        let base = i * joints * 3;
        let mut acc = [0.0; 3];
        for j in 0..joints {
            let g = &grad_pos[base + 3 * j..base + 3 * j + 3];
            acc[0] += g[0];
            acc[1] += g[1];
            acc[2] += g[2];
            if j == 0 {
                continue;
            }
            let o = layout.local_pos(j);
            let local = [row[o], row[o + 1], row[o + 2]];
            let gl = rot_y(-ang[i], [g[0], g[1], g[2]]);
            grad[i * d + o] += gl[0];
            grad[i * d + o + 1] += gl[1];
            grad[i * d + o + 2] += gl[2];
            let dr = rot_y_deriv(ang[i], local);
            g_ang[i] += g[0] * dr[0] + g[2] * dr[2];
        }
        g_root[i] = acc;
        grad[i * d + ReprLayout::HEIGHT] += acc[1];
    }
    // positions are a running sum of rotated velocity steps
    let (mut cx, mut cz) = (0.0, 0.0);
    for i in (1..frames).rev() {
        cx += g_root[i][0];
        cz += g_root[i][2];
        let prev = (i - 1) * d;
        let gv = rot_y(-ang[i - 1], [cx, 0.0, cz]);
        grad[prev + 1] += gv[0] / fps;
        grad[prev + 2] += gv[2] / fps;
        let dr = rot_y_deriv(ang[i - 1], [data[prev + 1], 0.0, data[prev + 2]]);
        g_ang[i - 1] += (cx * dr[0] + cz * dr[2]) / fps;
    }
    // yaw is a running sum of rates
    let mut c = 0.0;
    for i in (1..frames).rev() {
        c += g_ang[i];
        grad[(i - 1) * d + ReprLayout::ROT_VEL] += c / fps;
    }
    grad
}

/// Integrates root motion and places joints in the accumulated root frame.
///
/// Frame 0 has its root at the ground-plane origin facing +Z.
pub fn relative_to_global(rel: &RelativeMotion, skel: &Skeleton) -> Result<GlobalMotion> {
    if rel.joints != skel.num_joints() {
        return Err(Error::shape(
            "relative_to_global",
            &[skel.num_joints()],
            &[rel.joints],
        ));
    }
    if rel.data.len() != rel.frames * rel.dim() {
        return Err(Error::shape("relative_to_global", &[rel.frames, rel.dim()], &[rel.data.len()]));
    }
    let positions = relative_to_global_raw(&rel.data, rel.frames, rel.joints, rel.fps);
    Ok(GlobalMotion {
        frames: rel.frames,
        joints: rel.joints,
        fps: rel.fps,
        positions,
    })
}

/// Heading (yaw of the facing direction) of every frame, unwrapped.
pub fn headings(glob: &GlobalMotion, skel: &Skeleton) -> Vec<f64> {
    let mut out = Vec::with_capacity(glob.frames);
    let mut prev_raw: Option<f64> = None;
    let mut acc = 0.0;
    for i in 0..glob.frames {
        let mut across = [0.0, 0.0];
        for &(l, r) in skel.facing_pairs() {
            let (pl, pr) = (glob.pos(i, l), glob.pos(i, r));
            across[0] += pr[0] - pl[0];
            across[1] += pr[2] - pl[2];
        }
        // forward = up x across
        let (fx, fz) = (across[1], -across[0]);
        let raw = if fx.hypot(fz) < 1e-9 {
            prev_raw.unwrap_or(0.0)
        } else {
            fx.atan2(fz)
        };
        acc = match prev_raw {
            None => raw,
            Some(p) => acc + wrap_angle(raw - p),
        };
        prev_raw = Some(raw);
        out.push(acc);
    }
    out
}

/// Ground-plane frame of the first frame: root position and heading.
pub fn first_frame(glob: &GlobalMotion, skel: &Skeleton) -> RootFrame {
    let root = glob.pos(0, 0);
    RootFrame {
        origin: [root[0], root[2]],
        heading: headings(glob, skel).first().copied().unwrap_or(0.0),
    }
}

/// Thresholds for contact labelling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactThresholds {
    /// Foot height below which the foot may be in contact (m).
    pub height: f64,
    /// Horizontal displacement per frame below which the foot is planted (m).
    pub velocity: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        ContactThresholds {
            height: 0.05,
            velocity: 0.005,
        }
    }
}

/// Inverse of [`relative_to_global`], up to the rigid placement of frame 0.
pub fn global_to_relative(glob: &GlobalMotion, skel: &Skeleton) -> Result<RelativeMotion> {
    global_to_relative_with(glob, skel, ContactThresholds::default())
}

pub fn global_to_relative_with(
    glob: &GlobalMotion,
    skel: &Skeleton,
    contact: ContactThresholds,
) -> Result<RelativeMotion> {
    let (f, nj) = (glob.frames, glob.joints);
    if f < 2 {
        return Err(Error::validation("global_to_relative needs at least two frames"));
    }
    if nj != skel.num_joints() {
        return Err(Error::shape("global_to_relative", &[skel.num_joints()], &[nj]));
    }
    let layout = ReprLayout::new(nj);
    let d = layout.dim();
    let fps = glob.fps;
    let head = headings(glob, skel);
    let frame0 = RootFrame {
        origin: [glob.pos(0, 0)[0], glob.pos(0, 0)[2]],
        heading: head[0],
    };
    let ang: Vec<f64> = head.iter().map(|h| h - head[0]).collect();
    let aligned = frame0.motion_to_local(glob);

    let mut data = vec![0.0; f * d];
    for i in 0..f {
        // forward differences; the last frame repeats the previous one
        let (a, b) = if i + 1 < f { (i, i + 1) } else { (i - 1, i) };
        let row = &mut data[i * d..(i + 1) * d];
        row[ReprLayout::ROT_VEL] = (ang[b] - ang[a]) * fps;
        let (ra, rb) = (aligned.pos(a, 0), aligned.pos(b, 0));
        let v = rot_y(-ang[a], [(rb[0] - ra[0]) * fps, 0.0, (rb[2] - ra[2]) * fps]);
        row[1] = v[0];
        row[2] = v[2];
        let root = aligned.pos(i, 0);
        row[ReprLayout::HEIGHT] = root[UP];
        let mut locals = vec![[0.0; 3]; nj];
        for (j, slot) in locals.iter_mut().enumerate().skip(1) {
            let p = aligned.pos(i, j);
            *slot = rot_y(-ang[i], [p[0] - root[0], p[1] - root[1], p[2] - root[2]]);
            let o = layout.local_pos(j);
            row[o..o + 3].copy_from_slice(slot);
        }
        for j in 0..nj {
            let (pa, pb) = (aligned.pos(a, j), aligned.pos(b, j));
            let v = rot_y(
                -ang[a],
                [(pb[0] - pa[0]) * fps, (pb[1] - pa[1]) * fps, (pb[2] - pa[2]) * fps],
            );
            let o = layout.velocity(j);
            row[o..o + 3].copy_from_slice(&v);
        }
        for j in 1..nj {
            let parent = skel.parent(j).expect("non-root joint has a parent");
            let bone = sub3(locals[j], locals[parent]);
            let rot = rotation_between(skel.offset(j), bone);
            let o = layout.rotation(j);
            row[o..o + 6].copy_from_slice(&rot);
        }
    }
    let labels = detect_foot_contacts(glob, skel, contact.height, contact.velocity);
    let c = layout.contacts();
    for (i, l) in labels.iter().enumerate() {
        data[i * d + c..i * d + c + 4].copy_from_slice(l);
    }
    RelativeMotion::new(f, nj, fps, data)
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-12).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

/// Smallest rotation taking direction `from` onto `to`, returned as the
/// first two columns of its matrix. Degenerate bones map to the identity.
pub fn rotation_between(from: [f64; 3], to: [f64; 3]) -> [f64; 6] {
    const IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let (Some(a), Some(b)) = (normalize(from), normalize(to)) else {
        return IDENTITY;
    };
    let c = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let m = if c < -1.0 + 1e-9 {
        // half turn about any axis perpendicular to `a`
        let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let k = normalize(cross(a, helper)).expect("perpendicular axis");
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (cc, v) in row.iter_mut().enumerate() {
                *v = 2.0 * k[r] * k[cc] - if r == cc { 1.0 } else { 0.0 };
            }
        }
        m
    } else {
        let v = cross(a, b);
        let vx = [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]];
        let mut m = [[0.0; 3]; 3];
        let s = 1.0 / (1.0 + c);
        for r in 0..3 {
            for cc in 0..3 {
                let sq: f64 = (0..3).map(|k| vx[r][k] * vx[k][cc]).sum();
                m[r][cc] = if r == cc { 1.0 } else { 0.0 } + vx[r][cc] + sq * s;
            }
        }
        m
    };
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Contact labels `[l_ankle, l_toe, r_ankle, r_toe]` per frame.
///
/// A foot is in contact when it is below `h_thresh` and moves less than
/// `v_thresh` horizontally to the next frame (the last frame looks back).
pub fn detect_foot_contacts(glob: &GlobalMotion, skel: &Skeleton, h_thresh: f64, v_thresh: f64) -> Vec<[f64; 4]> {
    let f = glob.frames;
    let feet = skel.foot_joints();
    (0..f)
        .map(|i| {
            let mut out = [0.0; 4];
            for (slot, &j) in out.iter_mut().zip(&feet) {
                let p = glob.pos(i, j);
                let disp = if f < 2 {
                    0.0
                } else {
                    let (a, b) = if i + 1 < f { (i, i + 1) } else { (i - 1, i) };
                    let (pa, pb) = (glob.pos(a, j), glob.pos(b, j));
                    (pb[0] - pa[0]).hypot(pb[2] - pa[2])
                };
                if p[UP] < h_thresh && disp < v_thresh {
                    *slot = 1.0;
                }
            }
            out
        })
        .collect()
}
