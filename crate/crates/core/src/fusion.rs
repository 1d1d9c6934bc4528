//! Learnable scalar gate mixing the two encoder feature maps:
//! `fused = α·x_backbone + (1−α)·x_side`, with `α = sigmoid(logit)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureMap, Provenance};
use crate::error::{Error, Result};
use crate::param::{Module, Param};
use crate::tensor::{Real, Tensor};

pub const GATE_NAME: &str = "gate.logit";

/// Free (trainable) or pinned to one branch. Pinned gates skip the unused encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    #[default]
    #[serde(rename = "free")]
    Free,
    /// α = 0: side encoder only.
    #[serde(rename = "0")]
    SideOnly,
    /// α = 1: backbone only.
    #[serde(rename = "1")]
    BackboneOnly,
}

impl GateMode {
    pub fn uses_backbone(self) -> bool {
        self != GateMode::SideOnly
    }

    pub fn uses_side(self) -> bool {
        self != GateMode::BackboneOnly
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free" => Ok(GateMode::Free),
            "0" => Ok(GateMode::SideOnly),
            "1" => Ok(GateMode::BackboneOnly),
            other => Err(Error::Config(format!("gate must be one of free|0|1, got {other:?}"))),
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateMode::Free => "free",
            GateMode::SideOnly => "0",
            GateMode::BackboneOnly => "1",
        })
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug)]
pub struct Gate<T> {
    pub logit: Param<T>,
    mode: GateMode,
}

impl<T: Real> Gate<T> {
    /// Logit 0, i.e. α = 0.5.
    pub fn new(mode: GateMode) -> Self {
        let mut gate = Self {
            logit: Param::filled(GATE_NAME, &[1], T::zero()),
            mode: GateMode::Free,
        };
        gate.pin(mode);
        gate
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    /// Pinning removes the logit from the trainable set; freeing restores it
    /// at its stored value.
    pub fn pin(&mut self, mode: GateMode) {
        self.mode = mode;
        self.logit.set_trainable(mode == GateMode::Free);
    }

    pub fn alpha(&self) -> T {
        match self.mode {
            GateMode::Free => sigmoid(self.logit.value[0]),
            GateMode::SideOnly => T::zero(),
            GateMode::BackboneOnly => T::one(),
        }
    }

    /// α as logged and checkpointed.
    pub fn gate_value(&self) -> f32 {
        self.alpha().as_f64() as f32
    }

    /// Mixes the two maps. A pinned gate returns the surviving branch unchanged
    /// and does not require the other.
    pub fn fuse(&self, x_backbone: Option<&FeatureMap<T>>, x_side: Option<&FeatureMap<T>>) -> Result<FeatureMap<T>> {
        let mode = self.mode;
        fn need<'a, T>(m: Option<&'a FeatureMap<T>>, mode: GateMode, what: &str) -> Result<&'a FeatureMap<T>> {
            m.ok_or_else(|| Error::Shape(format!("gate mode {mode} needs the {what} feature map")))
        }
        match mode {
            GateMode::BackboneOnly => Ok(FeatureMap::new(need(x_backbone, mode, "backbone")?.data.clone(), Provenance::Fused)),
            GateMode::SideOnly => Ok(FeatureMap::new(need(x_side, mode, "side")?.data.clone(), Provenance::Fused)),
            GateMode::Free => {
                let (a, b) = (need(x_backbone, mode, "backbone")?, need(x_side, mode, "side")?);
                Ok(FeatureMap::new(mix(self.alpha(), &a.data, &b.data)?, Provenance::Fused))
            }
        }
    }

    /// Given `d fused`, accumulates `dL/dlogit` and returns `dL/dx_side`.
    pub fn backward(
        &mut self,
        d_fused: &Tensor<T>,
        x_backbone: Option<&Tensor<T>>,
        x_side: Option<&Tensor<T>>,
    ) -> Option<Tensor<T>> {
        match self.mode {
            GateMode::BackboneOnly => None,
            GateMode::SideOnly => Some(d_fused.clone()),
            GateMode::Free => {
                let (a, b) = (x_backbone.expect("backbone map"), x_side.expect("side map"));
                let alpha = self.alpha();
                if let Some(g) = self.logit.grad.as_mut() {
                    let d_alpha: T = d_fused
                        .data
                        .iter()
                        .zip(a.data.iter().zip(&b.data))
                        .map(|(&d, (&xa, &xb))| d * (xa - xb))
                        .sum();
                    g[0] += d_alpha * alpha * (T::one() - alpha);
                }
                let w = T::one() - alpha;
                Some(Tensor::from_vec(&d_fused.shape, d_fused.data.iter().map(|&d| d * w).collect()))
            }
        }
    }
}

/// Elementwise `alpha·a + (1−alpha)·b`.
pub fn mix<T: Real>(alpha: T, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "cannot fuse feature maps of shapes {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let beta = T::one() - alpha;
    Ok(Tensor::from_vec(
        &a.shape,
        a.data.iter().zip(&b.data).map(|(&x, &y)| alpha * x + beta * y).collect(),
    ))
}

impl<T: Real> Module<T> for Gate<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.logit)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.logit)
    }
}
