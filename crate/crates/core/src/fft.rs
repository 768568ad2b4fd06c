use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

/// In-place 2D FFT along both axes, unnormalised.
pub(crate) fn fft2(data: &mut Array2<Complex64>, direction: FftDirection) {
    let mut planner = FftPlanner::new();
    for axis in [Axis(1), Axis(0)] {
        let len = data.len_of(axis);
        let plan = planner.plan_fft(len, direction);
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        let mut buf = vec![Complex64::default(); len];
        for mut lane in data.lanes_mut(axis) {
            for (b, v) in buf.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            plan.process_with_scratch(&mut buf, &mut scratch);
            for (v, b) in lane.iter_mut().zip(buf.iter()) {
                *v = *b;
            }
        }
    }
}

/// Signed frequency index of FFT bin `k` for length `n`.
pub(crate) fn freq_index(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}
