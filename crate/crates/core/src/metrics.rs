//! Threshold-swept IoU.
//!
//! A pixel is predicted positive at threshold `t` when `p >= t`. Counts are
//! accumulated over a whole scene set for each of the 19 thresholds
//! `0.05, 0.10, …, 0.95` and the best threshold is chosen per class. IoU of
//! an empty prediction against an empty mask is 1.
//!
//! When several thresholds reach the same best IoU, the one closest to 0.5
//! wins (the lower one if two are equally close).

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_THRESHOLDS: usize = 19;

pub fn threshold(i: usize) -> f64 {
    (i + 1) as f64 / 20.0
}

pub fn thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(threshold)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    pub fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub type Sweep = [Counts; NUM_THRESHOLDS];

fn check_binary(mask: &[f64]) -> Result<()> {
    match mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
        Some(m) => Err(Error::Input(format!("mask value {m} is not binary"))),
        None => Ok(()),
    }
}

fn check_probs(probs: &[f64]) -> Result<()> {
    match probs.iter().find(|&&p| !(0.0..=1.0).contains(&p)) {
        Some(p) => Err(Error::Input(format!("probability {p} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Adds one class plane's confusion counts at every threshold into `acc`.
pub fn accumulate(probs: &[f64], mask: &[f64], acc: &mut Sweep) -> Result<()> {
    if probs.len() != mask.len() {
        return Err(Error::Input(format!(
            "probability plane has {} pixels, mask has {}",
            probs.len(),
            mask.len()
        )));
    }
    check_binary(mask)?;
    check_probs(probs)?;
    let ts = thresholds();
    for (&p, &m) in probs.iter().zip(mask) {
        let pos = m == 1.0;
        for (c, &t) in acc.iter_mut().zip(&ts) {
            match (p >= t, pos) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(())
}

/// Best (IoU, threshold index) of a sweep.
pub fn best(sweep: &Sweep) -> (f64, usize) {
    let mut best_i = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (i, c) in sweep.iter().enumerate() {
        let iou = c.iou();
        let closer = (threshold(i) - 0.5).abs() < (threshold(best_i) - 0.5).abs();
        if iou > best_iou || (iou == best_iou && closer) {
            best_iou = iou;
            best_i = i;
        }
    }
    (best_iou, best_i)
}

/// Single-plane sweep: (best IoU, best threshold).
pub fn iou_sweep(probs: &[f64], mask: &[f64]) -> Result<(f64, f64)> {
    let mut acc = [Counts::default(); NUM_THRESHOLDS];
    accumulate(probs, mask, &mut acc)?;
    let (iou, i) = best(&acc);
    Ok((iou, threshold(i)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub best_threshold: f64,
    pub iou: f64,
    pub counts: Sweep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub miou: f64,
}

impl EvalReport {
    pub fn from_sweeps(sweeps: &[Sweep]) -> Self {
        let classes: Vec<ClassReport> = sweeps
            .iter()
            .enumerate()
            .map(|(class, s)| {
                let (iou, i) = best(s);
                ClassReport {
                    class,
                    best_threshold: threshold(i),
                    iou,
                    counts: *s,
                }
            })
            .collect();
        let miou = classes.iter().map(|c| c.iou).sum::<f64>() / classes.len() as f64;
        EvalReport { classes, miou }
    }

    /// mIoU with every class evaluated at the same fixed threshold index.
    pub fn miou_at(&self, threshold_index: usize) -> f64 {
        self.classes.iter().map(|c| c.counts[threshold_index].iou()).sum::<f64>() / self.classes.len() as f64
    }

    /// `class,best_threshold,iou` rows followed by a `miou,<value>` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,best_threshold,iou\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{:.2},{:.6}", c.class, c.best_threshold, c.iou);
        }
        let _ = writeln!(s, "miou,{:.6}", self.miou);
        s
    }
}

/// Dataset-level counts for K classes over H×W×K probability maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepAccumulator {
    sweeps: Vec<Sweep>,
}

impl SweepAccumulator {
    pub fn new(k: usize) -> Self {
        SweepAccumulator {
            sweeps: vec![[Counts::default(); NUM_THRESHOLDS]; k],
        }
    }

    /// `probs` and `masks` are H×W×K.
    pub fn add(&mut self, probs: &Tensor, masks: &Tensor) -> Result<()> {
        let k = self.sweeps.len();
        if probs.shape() != masks.shape() || probs.rank() != 3 || probs.shape()[2] != k {
            return Err(Error::Input(format!(
                "probabilities {:?} and masks {:?} must both be H×W×{k}",
                probs.shape(),
                masks.shape()
            )));
        }
        for (class, sweep) in self.sweeps.iter_mut().enumerate() {
            let p: Vec<f64> = probs.data().iter().skip(class).step_by(k).copied().collect();
            let m: Vec<f64> = masks.data().iter().skip(class).step_by(k).copied().collect();
            accumulate(&p, &m, sweep)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SweepAccumulator) {
        for (a, b) in self.sweeps.iter_mut().zip(&other.sweeps) {
            for (x, y) in a.iter_mut().zip(b) {
                x.add(y);
            }
        }
    }

    pub fn sweeps(&self) -> &[Sweep] {
        &self.sweeps
    }

    pub fn report(&self) -> EvalReport {
        EvalReport::from_sweeps(&self.sweeps)
    }
}

/// Anything that maps an input item to H×W×K class probabilities.
pub trait Predictor<T>: Sync {
    fn predict(&self, item: &T) -> Result<Tensor>;
    fn target<'a>(&self, item: &'a T) -> &'a Tensor;
}

/// Evaluates `predictor` over `items` with a dataset-level threshold sweep.
pub fn evaluate<T: Sync, P: Predictor<T>>(predictor: &P, items: &[T], k: usize) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty scene set".into()));
    }
    let parts: Vec<SweepAccumulator> = items
        .par_iter()
        .map(|item| {
            let mut acc = SweepAccumulator::new(k);
            acc.add(&predictor.predict(item)?, predictor.target(item))?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = SweepAccumulator::new(k);
    for p in &parts {
        total.merge(p);
    }
    Ok(total.report())
}
