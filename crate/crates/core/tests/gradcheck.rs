//! Reverse-mode gradients against central finite differences in f64.

mod common;

use common::{check, model_check, primitive_cases};
use graftmt::adapters::{AdapterKind, AdapterPlacement};

#[test]
fn every_primitive() {
    for c in primitive_cases() {
        let worst = check(c.name, c.inputs, c.mode, &*c.build);
        eprintln!("{}: worst relative error {worst:.2e}", c.name);
    }
}

#[test]
fn full_grafted_model_with_glu_adapters() {
    let worst = model_check(AdapterKind::Glu, AdapterPlacement::Both, 40);
    eprintln!("grafted model (GLU): worst relative error {worst:.2e}");
}

#[test]
fn full_grafted_model_with_plain_adapters() {
    let worst = model_check(AdapterKind::Plain, AdapterPlacement::Encoder, 40);
    eprintln!("grafted model (plain): worst relative error {worst:.2e}");
}
