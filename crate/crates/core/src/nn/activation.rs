use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: ArrayView1<f64>) -> Array1<f64> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward(x: ArrayView1<f64>, dy: ArrayView1<f64>) -> Array1<f64> {
    Zip::from(&x).and(&dy).map_collect(|&v, &g| {
        let s = sigmoid(v);
        g * s * (1.0 + v * (1.0 - s))
    })
}

/// Tanh-approximated GELU.
pub fn gelu(x: ArrayView2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()))
}

pub fn gelu_backward(x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
    Zip::from(&x).and(&dy).map_collect(|&v, &g| {
        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
        let du = GELU_K * (1.0 + 3.0 * GELU_C * v * v);
        g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn derivatives_match_central_differences() {
        let xs = array![-3.0, -0.7, 0.0, 0.4, 2.5];
        let h = 1e-6;
        let ones = Array1::ones(xs.len());
        let ds = silu_backward(xs.view(), ones.view());
        let x2 = xs.clone().insert_axis(ndarray::Axis(0));
        let dg = gelu_backward(x2.view(), Array2::ones(x2.raw_dim()).view());
        for (i, &x) in xs.iter().enumerate() {
            let f = |v: f64| v * sigmoid(v);
            assert!(((f(x + h) - f(x - h)) / (2.0 * h) - ds[i]).abs() < 1e-8);
            let g = |v: f64| gelu(array![[v]].view())[[0, 0]];
            assert!(((g(x + h) - g(x - h)) / (2.0 * h) - dg[[0, i]]).abs() < 1e-8);
        }
    }
}
