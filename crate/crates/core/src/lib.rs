//! Acquisition and processing for a ground-based sky imaging station.
//!
//! [`solar`] computes Sun position and the daily session window, [`denoise`]
//! filters and averages frame bursts, [`fusion`] blends four visible
//! exposures into one high dynamic range frame, [`dataset`] reads, writes and
//! validates the daily archive, and [`sim`] drives the whole chain against a
//! synthetic sky.

pub mod dataset;
pub mod denoise;
pub mod frame;
pub mod fusion;
pub mod sim;
pub mod solar;

pub use frame::Frame;
pub use solar::{GeoLocation, SolarAngles, WindowPolicy};
pub use chrono::{Datelike, NaiveDate};
