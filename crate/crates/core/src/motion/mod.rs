//! Skeletons, motion representations and kinematic conversions.

pub mod repr;
pub mod skeleton;

pub use repr::{
    detect_foot_contacts, first_frame, global_to_relative, global_to_relative_with, headings, relative_to_global,
    rot_y, rotation_between, ContactThresholds, GlobalMotion, RelativeMotion, ReprLayout, RootFrame, DEFAULT_FPS,
};
pub use skeleton::{repr_dim, Joint, Skeleton, UP};
