/// Built-in generator families. Each instance describes one component g^i;
/// the component index is supplied at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Zero,
    /// `sign * (gamma/2) |z^i|^2`.
    DiagonalQuadratic { gamma: f64, sign: f64 },
    /// `beta * y^i`.
    LinearInY { beta: f64 },
    /// `mu . z^i + c`.
    Linear { mu: Vec<f64>, c: f64 },
    /// `sign * (gamma/2) |z^i|^2 + beta * sin(y^source)`.
    CoupledQuadratic {
        gamma: f64,
        sign: f64,
        beta: f64,
        source: usize,
    },
    /// `(|y|^2 + sin|z^i|) |z| + |z|^{3/2} + |z^i|^2`: superlinear growth in y.
    PolynomialYGrowth,
    /// `(e^{-y^i} + cos|z^i|) |z| - |z|^{4/3} + (-1)^{i+1} |z^i|^2` with
    /// zero-based i, so the first component carries `-|z^1|^2`.
    ExponentialYGrowth,
    /// `|z^row|^2` regardless of the component index.
    OffDiagonalQuadratic { row: usize },
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>()
}

impl Family {
    pub fn eval(&self, i: usize, y: &[f64], z: &[f64], d: usize) -> f64 {
        let zi = &z[i * d..(i + 1) * d];
        match self {
            Family::Zero => 0.0,
            Family::DiagonalQuadratic { gamma, sign } => sign * 0.5 * gamma * norm2(zi),
            Family::LinearInY { beta } => beta * y[i],
            Family::Linear { mu, c } => mu.iter().zip(zi).map(|(a, b)| a * b).sum::<f64>() + c,
            Family::CoupledQuadratic {
                gamma,
                sign,
                beta,
                source,
            } => sign * 0.5 * gamma * norm2(zi) + beta * y[*source].sin(),
            Family::PolynomialYGrowth => {
                let zn = norm(z);
                let zin = norm(zi);
                (norm2(y) + zin.sin()) * zn + zn.powf(1.5) + zin * zin
            }
            Family::ExponentialYGrowth => {
                let zn = norm(z);
                let zin = norm(zi);
                let sign = if i.is_multiple_of(2) { -1.0 } else { 1.0 };
                ((-y[i]).exp() + zin.cos()) * zn - zn.powf(4.0 / 3.0) + sign * zin * zin
            }
            Family::OffDiagonalQuadratic { row } => norm2(&z[row * d..(row + 1) * d]),
        }
    }

    pub fn reads_other_rows(&self, i: usize) -> bool {
        match self {
            Family::PolynomialYGrowth | Family::ExponentialYGrowth => true,
            Family::OffDiagonalQuadratic { row } => *row != i,
            _ => false,
        }
    }

    pub fn depends_on_y(&self) -> bool {
        !matches!(
            self,
            Family::Zero | Family::DiagonalQuadratic { .. } | Family::Linear { .. } | Family::OffDiagonalQuadratic { .. }
        )
    }
}
