//! Three-dimensional FFT over `[C, D, H, W]` volumes.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! `1/N` with `N = D·H·W`. A constant volume of value `c` therefore has a
//! single DC coefficient `c·N`. Arbitrary (non power-of-two) extents are
//! supported through rustfft's mixed-radix and Bluestein plans.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

use crate::tensor::{ComplexTensor, Tensor};

/// Planned 3-D transform for fixed extents, usable for `f32` and `f64`.
pub struct Fft3<T: FftNum> {
    dims: (usize, usize, usize),
    fwd: [Arc<dyn Fft<T>>; 3],
    inv: [Arc<dyn Fft<T>>; 3],
}

impl<T: FftNum> Fft3<T> {
    pub fn new(planner: &mut FftPlanner<T>, dims: (usize, usize, usize)) -> Self {
        let (d, h, w) = dims;
        Fft3 {
            dims,
            fwd: [
                planner.plan_fft_forward(d),
                planner.plan_fft_forward(h),
                planner.plan_fft_forward(w),
            ],
            inv: [
                planner.plan_fft_inverse(d),
                planner.plan_fft_inverse(h),
                planner.plan_fft_inverse(w),
            ],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    /// In-place forward transform of one `D·H·W` volume.
    pub fn forward(&self, vol: &mut [Complex<T>]) {
        self.run(vol, &self.fwd);
    }

    /// In-place inverse transform including the `1/N` factor.
    pub fn inverse(&self, vol: &mut [Complex<T>]) {
        self.run(vol, &self.inv);
        let (d, h, w) = self.dims;
        let scale = T::from_usize(d * h * w).unwrap();
        for v in vol.iter_mut() {
            *v = *v / scale;
        }
    }

    fn run(&self, vol: &mut [Complex<T>], plans: &[Arc<dyn Fft<T>>; 3]) {
        let (d, h, w) = self.dims;
        assert_eq!(vol.len(), d * h * w, "volume length does not match plan");
        // W axis is contiguous.
        if w > 1 {
            plans[2].process(vol);
        }
        let mut lane = Vec::new();
        if h > 1 {
            lane.resize(h, Complex::new(T::zero(), T::zero()));
            for z in 0..d {
                for x in 0..w {
                    let base = z * h * w + x;
                    for (y, l) in lane.iter_mut().enumerate() {
                        *l = vol[base + y * w];
                    }
                    plans[1].process(&mut lane);
                    for (y, l) in lane.iter().enumerate() {
                        vol[base + y * w] = *l;
                    }
                }
            }
        }
        if d > 1 {
            lane.resize(d, Complex::new(T::zero(), T::zero()));
            let plane = h * w;
            for p in 0..plane {
                for (z, l) in lane.iter_mut().enumerate() {
                    *l = vol[z * plane + p];
                }
                plans[0].process(&mut lane);
                for (z, l) in lane.iter().enumerate() {
                    vol[z * plane + p] = *l;
                }
            }
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn with_plan<R>(dims: (usize, usize, usize), f: impl FnOnce(&Fft3<f64>) -> R) -> R {
    PLANNER.with(|p| {
        let plan = Fft3::new(&mut p.borrow_mut(), dims);
        f(&plan)
    })
}

/// Channel-wise forward FFT of a real `[C, D, H, W]` tensor.
pub fn fft3(x: &Tensor) -> ComplexTensor {
    let mut out = ComplexTensor::from_real(x);
    fft3_inplace(&mut out, false);
    out
}

/// Channel-wise inverse FFT (with `1/N`).
pub fn ifft3(x: &ComplexTensor) -> ComplexTensor {
    let mut out = x.clone();
    fft3_inplace(&mut out, true);
    out
}

fn fft3_inplace(x: &mut ComplexTensor, inverse: bool) {
    assert_eq!(x.shape.len(), 4, "fft3 expects [C, D, H, W]");
    let dims = (x.shape[1], x.shape[2], x.shape[3]);
    let n = dims.0 * dims.1 * dims.2;
    with_plan(dims, |plan| {
        for vol in x.data.chunks_mut(n) {
            if inverse {
                plan.inverse(vol);
            } else {
                plan.forward(vol);
            }
        }
    });
}
