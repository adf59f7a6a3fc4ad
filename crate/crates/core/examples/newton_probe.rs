// Scratch diagnostic: residual history of full-step Newton on the
// desk-scale first step. Not part of the deliverable surface.
use chident::fem::NodalField;
use chident::forward::*;
use chident::mesh::{build_uniform, Rect};
use chident::model::{self, ModelConfig, Orientation};
use std::sync::Arc;

fn main() {
    let mesh = Arc::new(
        build_uniform(
            Rect { x0: -5.0, y0: -5.0, x1: 5.0, y1: 5.0 },
            32,
        )
        .unwrap(),
    );
    let cfg = ModelConfig { eps: 0.1, s: 1e3, ..ModelConfig::default() };
    let (phi0, sigma0) = initial_fields(&mesh, &cfg, Orientation::InsidePositive).unwrap();
    let mn = phi0.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = phi0.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("phi0 range: [{mn:.6}, {mx:.6}]  (band edges at ±1, ±1.001)");
    let over: usize = phi0.values().iter().filter(|&&v| v.abs() > 1.0).count();
    let deep: usize = phi0.values().iter().filter(|&&v| v.abs() > 1.001).count();
    println!("nodes beyond |1|: {over}, beyond |1.001|: {deep} of {}", phi0.len());
    let _ = (sigma0, NodalField::constant(&mesh, 0.0));
}
