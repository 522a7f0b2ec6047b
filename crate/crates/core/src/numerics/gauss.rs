use super::Scalar;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
///
/// Nodes are computed by Newton iteration on the Legendre polynomial, so no
/// tabulated constants are needed and the rule works at any order and scalar
/// type.
#[derive(Clone, Debug)]
pub struct GaussLegendre<S> {
    pub nodes: Vec<S>,
    pub weights: Vec<S>,
}

impl<S: Scalar> GaussLegendre<S> {
    pub fn new(n: usize) -> Self {
        assert!(n >= 2);
        let mut nodes = vec![S::zero(); n];
        let mut weights = vec![S::zero(); n];
        let nf = S::of(n as f64);
        for i in 0..n {
            // Tricomi-type initial guess
            let mut x = (S::PI() * (S::of(i as f64) + S::of(0.75)) / (nf + S::of(0.5))).cos();
            let mut dp = S::one();
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x = x - dx;
                if dx.abs() <= S::epsilon() * S::of(4.0) {
                    let (p2, d2) = legendre(n, x);
                    dp = d2;
                    x = x - p2 / d2;
                    break;
                }
            }
            nodes[i] = x;
            let one = S::one();
            weights[i] = S::of(2.0) / ((one - x * x) * dp * dp);
        }
        GaussLegendre { nodes, weights }
    }
}

/// Legendre polynomial `P_n(x)` and derivative by the three-term recurrence.
fn legendre<S: Scalar>(n: usize, x: S) -> (S, S) {
    let mut p0 = S::one();
    let mut p1 = x;
    for k in 2..=n {
        let kf = S::of(k as f64);
        let p2 = ((S::of(2.0) * kf - S::one()) * x * p1 - (kf - S::one()) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = S::of(n as f64) * (x * p1 - p0) / (x * x - S::one());
    (p1, d)
}
