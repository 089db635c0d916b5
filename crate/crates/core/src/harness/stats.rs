use statrs::distribution::{ContinuousCDF, StudentsT};

/// Sample statistics of a small set of runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); zero for a single value.
    pub std: f64,
    /// Standard error of the mean, `std / sqrt(n)`.
    pub stderr: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            n,
            mean: f64::NAN,
            std: f64::NAN,
            stderr: f64::NAN,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary {
        n,
        mean,
        std,
        stderr: std / (n as f64).sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p_value: f64,
}

/// Welch's unequal-variance t-test. With zero variance in both samples the
/// p-value is 1 for equal means and 0 otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> WelchTest {
    let (sa, sb) = (summarize(a), summarize(b));
    let (va, vb) = (sa.std.powi(2) / sa.n as f64, sb.std.powi(2) / sb.n as f64);
    let diff = sa.mean - sb.mean;
    let se2 = va + vb;
    if se2 == 0.0 || !se2.is_finite() {
        let equal = diff == 0.0;
        return WelchTest {
            t: if equal { 0.0 } else { f64::INFINITY.copysign(diff) },
            df: f64::NAN,
            p_value: if equal { 1.0 } else { 0.0 },
        };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (sa.n - 1) as f64 + vb * vb / (sb.n - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    WelchTest {
        t,
        df,
        p_value: (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0),
    }
}
