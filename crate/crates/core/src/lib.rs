//! Image-to-point-cloud registration with per-patch uncertainty and
//! adversarial modality alignment, trained and evaluated on synthetic scenes.
//!
//! The pipeline runs [`scenegen`] to build paired images and point clouds,
//! [`uhmm`] to match them coarse to fine, [`amam`] to align the two feature
//! spaces, [`losses`] to train on the [`autodiff`] tape, and [`pose`] to
//! recover the camera pose. [`harness`] ties these into training,
//! evaluation and ablation runs.
//!
//! ```
//! use xmreg::scenegen::{generate_scene, SceneConfig};
//!
//! let s = generate_scene(&SceneConfig::default(), 0).unwrap();
//! assert!(s.overlap >= 0.3);
//! ```

pub mod amam;
pub mod autodiff;
mod binio;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod pose;
pub mod scenegen;
pub mod uhmm;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    struct Pipeline;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/scenes.md")]
    struct Scenes;
    #[doc = include_str!("../../../book/src/matching.md")]
    struct Matching;
    #[doc = include_str!("../../../book/src/alignment.md")]
    struct Alignment;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/pose.md")]
    struct Pose;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
    #[doc = include_str!("../../../book/src/acceptance.md")]
    struct Acceptance;
}
