#![allow(dead_code)]

pub mod gen;
pub mod tiers;
pub mod wire;
