//! Chronological probing engine.
//!
//! Measures, checkpoint by checkpoint, how much morphological, syntactic and
//! discourse information a training run's snapshots encode:
//!
//! - [`taskset`] loads and splits probing datasets and builds shuffled-label controls;
//! - [`embedcache`] is the binary activation cache written by extractors;
//! - [`compose`] turns token embeddings into probe features;
//! - [`probe`] is the logistic-regression classifier;
//! - [`mpscore`] scores minimal pairs from masked log-probabilities;
//! - [`trajectory`] assembles accuracy series and finds where they settle;
//! - [`runner`] plans and executes the (task x checkpoint x real/control) grid;
//! - [`report`] writes CSV tables and SVG charts.
//!
//! [`synthetic`] generates desk-scale fixtures with a known learning curve.

pub mod compose;
pub mod embedcache;
pub mod mpscore;
pub mod probe;
pub mod report;
pub mod runner;
pub mod synthetic;
pub mod taskset;
pub mod trajectory;
