//! Detector-free image matching with latent topics.
//!
//! The crate is organized bottom-up: [`geometry`] holds the camera and
//! homography math, [`nn`] the small set of layers built on `candle-core`,
//! [`backbone`] the two-scale convolutional encoder, [`topic_matcher`] the
//! coarse stage and [`fine_refiner`] the dynamic sub-pixel stage.
//! [`model`] ties them together; [`losses`], [`optim`], [`checkpoint`] and
//! [`trainer`] cover training, [`synth_data`] the synthetic scenes and
//! [`evaluator`] the metrics and the analytic cost model.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backbone;
pub mod checkpoint;
pub mod evaluator;
pub mod fine_refiner;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synth_data;
pub mod topic_matcher;
pub mod trainer;
