//! Attention-enhanced neural ODEs for multi-ion transport across nanoporous
//! membranes, plus the Nernst-Planck pore-model oracle the networks are
//! pre-trained on and the benchmark harness used to compare them.
//!
//! Layering, bottom up:
//! - [`ad`]: reverse-mode autodiff over dense f64 arrays
//! - [`nn`]: linear layers, masked single-head attention, Adam with freezing
//! - [`odeint`]: adaptive Tsitouras 5(4) integrator, differentiable end to end
//! - [`data`]: the fixed ion vocabulary, mixtures, datasets, noise, CSV I/O
//! - [`dspmde`]: simplified Donnan-steric pore model (extended Nernst-Planck)
//! - [`model`]: the physics-informed ODE network and its training loop
//! - [`bench`]: baseline families and the pre-training/constraint ablations
//! - [`plot`]: self-contained SVG emission for rollouts, parity and heatmaps

pub mod ad;
pub mod bench;
pub mod data;
pub mod dspmde;
pub mod model;
pub mod odeint;
pub mod plot;
pub mod nn;
pub mod rng;
