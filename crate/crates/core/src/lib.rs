//! Numerical toolkit for degenerating holomorphic maps `ℂP¹ → ℂPᵏ`, the
//! associated Kazdan–Warner / vortex problem, bubble trees and gauge
//! holonomy.

pub mod bubble;
pub mod expr;
pub mod holo;
pub mod holonomy;
pub mod kw;
pub mod quad;
pub mod runner;
pub mod vortex;
pub mod sphere;
pub mod tree;
