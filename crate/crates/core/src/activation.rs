use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
    /// Row-wise over the last axis.
    Softmax,
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
            Activation::Softmax => "softmax",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            "softmax" => Ok(Activation::Softmax),
            other => Err(format!("unknown activation '{other}'")),
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softmax_rows<T: Scalar>(pre: &Tensor<T>) -> Tensor<T> {
    let width = *pre.shape().last().unwrap_or(&1);
    let mut out = pre.clone();
    for row in out.data_mut().chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

impl Activation {
    pub fn apply<T: Scalar>(self, pre: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Sigmoid => pre.map(sigmoid),
            Activation::Relu => pre.map(|z| z.max(T::zero())),
            Activation::Identity => pre.clone(),
            Activation::Softmax => softmax_rows(pre),
        }
    }

    /// Elementwise derivative evaluated at the pre-activation. For softmax
    /// this is the diagonal of the row Jacobian, `s (1 - s)`.
    pub fn derivative<T: Scalar>(self, pre: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Sigmoid => pre.map(|z| {
                let s = sigmoid(z);
                s * (T::one() - s)
            }),
            Activation::Relu => pre.map(|z| if z > T::zero() { T::one() } else { T::zero() }),
            Activation::Identity => pre.map(|_| T::one()),
            Activation::Softmax => softmax_rows(pre).map(|s| s * (T::one() - s)),
        }
    }
}

/// Functional form of [`Activation::apply`].
pub fn activation_apply<T: Scalar>(pre: &Tensor<T>, kind: Activation) -> Tensor<T> {
    kind.apply(pre)
}

/// Functional form of [`Activation::derivative`].
pub fn activation_derivative<T: Scalar>(pre: &Tensor<T>, kind: Activation) -> Tensor<T> {
    kind.derivative(pre)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn hand_values() {
        assert_eq!(Activation::Sigmoid.apply(&t(&[0.0])).data(), &[0.5]);
        assert_eq!(Activation::Relu.apply(&t(&[-1.0, 2.0])).data(), &[0.0, 2.0]);
        assert_eq!(Activation::Sigmoid.derivative(&t(&[0.0])).data(), &[0.25]);
        assert_eq!(Activation::Relu.derivative(&t(&[-3.0])).data(), &[0.0]);
    }

    #[test]
    fn sigmoid_matches_extended_precision_values() {
        // 1/(1+exp(-z)) evaluated with mpmath at 50 significant digits.
        let cases: [(f64, f64); 9] = [
            (-30.0, 9.357622968839299e-14),
            (-10.0, 4.5397868702434395e-05),
            (-2.5, 0.07585818002124355),
            (-0.5, 0.37754066879814546),
            (0.1, 0.52497918747894),
            (1.0, 0.7310585786300049),
            (3.7, 0.9758729785823308),
            (12.0, 0.9999938558253978),
            (40.0, 1.0),
        ];
        for (z, expected) in cases {
            let got: f64 = sigmoid(z);
            assert!((got - expected).abs() <= 1e-14, "sigmoid({z}) = {got}, want {expected}");
        }
    }

    #[test]
    fn sigmoid_stays_in_open_interval_and_relu_nonnegative() {
        let z: Tensor<f64> = RngStream::new(1).normal(&[1000], 10.0).unwrap();
        let s = Activation::Sigmoid.apply(&z);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(Activation::Relu.apply(&z).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn derivatives_match_central_differences() {
        let mut rng = RngStream::new(9);
        let h = 1e-5;
        let points: Vec<f64> = (0..100)
            .map(|_| {
                let v = 3.0 * rng.standard_normal();
                // keep relu test points away from the kink
                if v.abs() < 1e-4 {
                    0.5
                } else {
                    v
                }
            })
            .collect();
        for kind in [Activation::Sigmoid, Activation::Relu, Activation::Identity] {
            let d = kind.derivative(&t(&points));
            let plus = kind.apply(&t(&points.iter().map(|p| p + h).collect::<Vec<_>>()));
            let minus = kind.apply(&t(&points.iter().map(|p| p - h).collect::<Vec<_>>()));
            for i in 0..points.len() {
                let fd = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
                assert!((fd - d.data()[i]).abs() < 1e-6, "{kind} at {}", points[i]);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 1000., 0., -1000.]).unwrap();
        let s = Activation::Softmax.apply(&z);
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
}
