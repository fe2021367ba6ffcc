//! Bundled 56x56 gray crops used by the equivariance and training
//! experiments. Sources are listed in `data/README.md`.

use ndarray::Array2;

use crate::error::Result;
use crate::io::decode_pnm;

macro_rules! crops {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_bytes!(concat!("../data/natural/", $name, ".pgm")))),*]
    };
}

static EVAL: &[(&str, &[u8])] = crops![
    "eval_00_astronaut", "eval_01_rocket", "eval_02_chelsea", "eval_03_coffee", "eval_04_grass",
    "eval_05_gravel", "eval_06_brick", "eval_07_astronaut", "eval_08_rocket", "eval_09_chelsea",
    "eval_10_coffee", "eval_11_grass", "eval_12_gravel", "eval_13_brick", "eval_14_astronaut",
    "eval_15_rocket", "eval_16_chelsea", "eval_17_coffee", "eval_18_grass", "eval_19_gravel",
];

static TRAIN: &[(&str, &[u8])] = crops![
    "train_00_brick", "train_01_astronaut", "train_02_rocket", "train_03_chelsea",
    "train_04_coffee", "train_05_grass", "train_06_gravel", "train_07_brick",
    "train_08_astronaut", "train_09_rocket", "train_10_chelsea", "train_11_coffee",
    "train_12_grass", "train_13_gravel", "train_14_brick", "train_15_astronaut",
];

pub const CROP_SIDE: usize = 56;

fn decode(set: &[(&str, &[u8])]) -> Result<Vec<(String, Array2<f64>)>> {
    set.iter().map(|(n, b)| Ok((n.to_string(), decode_pnm(b)?))).collect()
}

/// Twenty held-out crops.
pub fn eval_crops() -> Result<Vec<(String, Array2<f64>)>> {
    decode(EVAL)
}

/// Sixteen training crops.
pub fn train_crops() -> Result<Vec<(String, Array2<f64>)>> {
    decode(TRAIN)
}
