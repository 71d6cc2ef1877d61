#![allow(dead_code)]

pub mod autodiff;
