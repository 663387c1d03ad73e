#![allow(dead_code)]

pub mod enumerate;
pub mod gradcheck;
pub mod pareto;
