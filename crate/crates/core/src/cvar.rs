//! Complex values on the tape as pairs of real nodes.

use crate::autodiff::{Tape, Var};
use crate::conv::ConvGeom;
use crate::error::Result;
use crate::tensor::ComplexTensor;

#[derive(Clone, Debug)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

impl CVar {
    pub fn constant(z: ComplexTensor) -> Self {
        Self {
            re: Var::constant(z.re),
            im: Var::constant(z.im),
        }
    }

    pub fn leaf(tape: &Tape, z: ComplexTensor) -> Self {
        Self {
            re: tape.leaf(z.re),
            im: tape.leaf(z.im),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn value(&self) -> ComplexTensor {
        ComplexTensor {
            re: self.re.value().clone(),
            im: self.im.value().clone(),
        }
    }

    pub fn add(&self, tape: &Tape, other: &CVar) -> Result<CVar> {
        Ok(CVar {
            re: tape.add(&self.re, &other.re)?,
            im: tape.add(&self.im, &other.im)?,
        })
    }

    /// Elementwise product with a real (rotation-invariant) factor.
    pub fn scale_by(&self, tape: &Tape, s: &Var) -> Result<CVar> {
        Ok(CVar {
            re: tape.mul(&self.re, s)?,
            im: tape.mul(&self.im, s)?,
        })
    }

    pub fn modulus(&self, tape: &Tape) -> Result<Var> {
        tape.modulus(&self.re, &self.im)
    }

    /// `|z|^2`.
    pub fn power(&self, tape: &Tape) -> Result<Var> {
        let rr = tape.mul(&self.re, &self.re)?;
        let ii = tape.mul(&self.im, &self.im)?;
        tape.add(&rr, &ii)
    }

    /// Bias-free complex correlation via four real correlations.
    pub fn conv2d(&self, tape: &Tape, w: &CVar, geom: ConvGeom) -> Result<CVar> {
        let rr = tape.conv2d(&self.re, &w.re, geom)?;
        let ii = tape.conv2d(&self.im, &w.im, geom)?;
        let ri = tape.conv2d(&self.re, &w.im, geom)?;
        let ir = tape.conv2d(&self.im, &w.re, geom)?;
        Ok(CVar {
            re: tape.sub(&rr, &ii)?,
            im: tape.add(&ri, &ir)?,
        })
    }

    pub fn conv_transpose2d(&self, tape: &Tape, w: &CVar, geom: ConvGeom) -> Result<CVar> {
        let rr = tape.conv_transpose2d(&self.re, &w.re, geom)?;
        let ii = tape.conv_transpose2d(&self.im, &w.im, geom)?;
        let ri = tape.conv_transpose2d(&self.re, &w.im, geom)?;
        let ir = tape.conv_transpose2d(&self.im, &w.re, geom)?;
        Ok(CVar {
            re: tape.sub(&rr, &ii)?,
            im: tape.add(&ri, &ir)?,
        })
    }

    /// Bias-free complex linear map over the last axis.
    pub fn matmul(&self, tape: &Tape, w: &CVar) -> Result<CVar> {
        let rr = tape.matmul(&self.re, &w.re)?;
        let ii = tape.matmul(&self.im, &w.im)?;
        let ri = tape.matmul(&self.re, &w.im)?;
        let ir = tape.matmul(&self.im, &w.re)?;
        Ok(CVar {
            re: tape.sub(&rr, &ii)?,
            im: tape.add(&ri, &ir)?,
        })
    }

    pub fn permute(&self, tape: &Tape, perm: &[usize]) -> Result<CVar> {
        Ok(CVar {
            re: tape.permute(&self.re, perm)?,
            im: tape.permute(&self.im, perm)?,
        })
    }

    pub fn reshape(&self, tape: &Tape, shape: &[usize]) -> Result<CVar> {
        Ok(CVar {
            re: tape.reshape(&self.re, shape)?,
            im: tape.reshape(&self.im, shape)?,
        })
    }

    pub fn slice(&self, tape: &Tape, axis: usize, start: usize, len: usize) -> Result<CVar> {
        Ok(CVar {
            re: tape.slice(&self.re, axis, start, len)?,
            im: tape.slice(&self.im, axis, start, len)?,
        })
    }

    pub fn concat(tape: &Tape, parts: &[CVar], axis: usize) -> Result<CVar> {
        let re: Vec<Var> = parts.iter().map(|p| p.re.clone()).collect();
        let im: Vec<Var> = parts.iter().map(|p| p.im.clone()).collect();
        Ok(CVar {
            re: tape.concat(&re, axis)?,
            im: tape.concat(&im, axis)?,
        })
    }
}
