use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{self, KernelSpec};

/// One client's local data.
#[derive(Debug, Clone)]
pub struct ClientData {
    covariates: DMatrix<f64>,
    responses: DVector<f64>,
    /// `Phi_i`, present whenever the kernel has a feature map.
    features: Option<DMatrix<f64>>,
    true_theta: Option<DVector<f64>>,
    /// `f_i*(x_i)`: noise-free responses, when known.
    clean: Option<DVector<f64>>,
}

impl ClientData {
    pub fn new(covariates: DMatrix<f64>, responses: DVector<f64>) -> Self {
        ClientData {
            covariates,
            responses,
            features: None,
            true_theta: None,
            clean: None,
        }
    }

    pub fn with_true_theta(mut self, theta: DVector<f64>) -> Self {
        self.true_theta = Some(theta);
        self
    }

    /// Noise-free responses `f_i*(x_i)`, for true models without coefficients.
    pub fn with_clean_responses(mut self, clean: DVector<f64>) -> Self {
        self.clean = Some(clean);
        self
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    pub fn features(&self) -> Result<&DMatrix<f64>> {
        self.features
            .as_ref()
            .ok_or_else(|| Error::UnsupportedRepresentation("client data has no explicit features".into()))
    }

    pub fn true_theta(&self) -> Option<&DVector<f64>> {
        self.true_theta.as_ref()
    }

    /// `f_i*(x_i)`, from stored clean responses or from `Phi_i theta_i*`.
    pub fn true_values(&self) -> Option<DVector<f64>> {
        if let Some(c) = &self.clean {
            return Some(c.clone());
        }
        match (&self.features, &self.true_theta) {
            (Some(phi), Some(t)) => Some(phi * t),
            _ => None,
        }
    }
}

/// Clients plus the kernel they share.
#[derive(Debug, Clone)]
pub struct FederatedDataset {
    kernel: KernelSpec,
    clients: Vec<ClientData>,
    sigma: f64,
    /// Shared/global model the data was generated around, if any.
    theta_star: Option<DVector<f64>>,
}

impl FederatedDataset {
    pub fn new(kernel: KernelSpec, mut clients: Vec<ClientData>, sigma: f64) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::EmptyInput("dataset without clients"));
        }
        let p = kernel.input_dim();
        let d = kernel.feature_dim();
        for (i, c) in clients.iter_mut().enumerate() {
            if c.is_empty() {
                return Err(Error::EmptyInput("client without samples"));
            }
            if c.covariates.nrows() != c.responses.len() {
                return Err(Error::shape(format!(
                    "client {i}: {} covariate rows but {} responses",
                    c.covariates.nrows(),
                    c.responses.len()
                )));
            }
            if c.covariates.ncols() != p {
                return Err(Error::shape(format!(
                    "client {i}: covariates have {} columns, kernel expects {p}",
                    c.covariates.ncols()
                )));
            }
            if let (Some(t), Some(d)) = (&c.true_theta, d) {
                if t.len() != d {
                    return Err(Error::shape(format!(
                        "client {i}: true model has length {}, feature dimension is {d}",
                        t.len()
                    )));
                }
            }
            if let Some(cl) = &c.clean {
                if cl.len() != c.len() {
                    return Err(Error::shape(format!(
                        "client {i}: {} clean responses for {} samples",
                        cl.len(),
                        c.len()
                    )));
                }
            }
            if d.is_some() && c.features.is_none() {
                c.features = Some(kernel::feature_matrix(&kernel, &c.covariates)?);
            }
        }
        if !(sigma >= 0.0) {
            return Err(Error::config(format!("noise scale must be >= 0, got {sigma}")));
        }
        Ok(FederatedDataset {
            kernel,
            clients,
            sigma,
            theta_star: None,
        })
    }

    pub fn with_theta_star(mut self, theta: DVector<f64>) -> Self {
        self.theta_star = Some(theta);
        self
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn clients(&self) -> &[ClientData] {
        &self.clients
    }

    pub fn client(&self, i: usize) -> &ClientData {
        &self.clients[i]
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn theta_star(&self) -> Option<&DVector<f64>> {
        self.theta_star.as_ref()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.kernel.feature_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(ClientData::len).collect()
    }

    /// `N = sum_i n_i`.
    pub fn total(&self) -> usize {
        self.clients.iter().map(ClientData::len).sum()
    }

    /// `w_i = n_i / N`.
    pub fn weights(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.clients.iter().map(|c| c.len() as f64 / n).collect()
    }

    /// Offsets of each client's block in the stacked ordering.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.clients
            .iter()
            .map(|c| {
                let o = acc;
                acc += c.len();
                o
            })
            .collect()
    }

    pub fn stacked_covariates(&self) -> DMatrix<f64> {
        let p = self.kernel.input_dim();
        let mut out = DMatrix::zeros(self.total(), p);
        let mut r = 0;
        for c in &self.clients {
            out.rows_mut(r, c.len()).copy_from(&c.covariates);
            r += c.len();
        }
        out
    }

    pub fn stacked_responses(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.total());
        let mut r = 0;
        for c in &self.clients {
            out.rows_mut(r, c.len()).copy_from(&c.responses);
            r += c.len();
        }
        out
    }

    /// The `N x d` stacked feature matrix `Phi`.
    pub fn stacked_features(&self) -> Result<DMatrix<f64>> {
        let d = self.feature_dim().ok_or_else(|| {
            Error::UnsupportedRepresentation(format!("{:?} has no feature map", self.kernel))
        })?;
        let mut out = DMatrix::zeros(self.total(), d);
        let mut r = 0;
        for c in &self.clients {
            out.rows_mut(r, c.len()).copy_from(c.features()?);
            r += c.len();
        }
        Ok(out)
    }

    /// Stacked `f_i*(x_i)`; a configuration error if any client lacks a
    /// true model.
    pub fn stacked_true_values(&self) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.total());
        let mut r = 0;
        for (i, c) in self.clients.iter().enumerate() {
            let v = c
                .true_values()
                .ok_or_else(|| Error::config(format!("client {i} has no true model")))?;
            out.rows_mut(r, c.len()).copy_from(&v);
            r += c.len();
        }
        Ok(out)
    }

    /// Same covariates and true models, new responses.
    pub fn with_responses(&self, responses: Vec<DVector<f64>>) -> Result<Self> {
        if responses.len() != self.clients.len() {
            return Err(Error::shape(format!(
                "{} response vectors for {} clients",
                responses.len(),
                self.clients.len()
            )));
        }
        let mut out = self.clone();
        for (i, (c, y)) in out.clients.iter_mut().zip(responses).enumerate() {
            if y.len() != c.len() {
                return Err(Error::shape(format!(
                    "client {i}: {} responses for {} samples",
                    y.len(),
                    c.len()
                )));
            }
            c.responses = y;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_clients() -> FederatedDataset {
        let k = KernelSpec::Linear { dim: 1 };
        let a = ClientData::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, 1.0))
            .with_true_theta(DVector::from_element(1, 1.0));
        let b = ClientData::new(
            DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 3.0]),
            DVector::from_vec(vec![3.0, 6.0, 9.0]),
        )
        .with_true_theta(DVector::from_element(1, 3.0));
        FederatedDataset::new(k, vec![a, b], 0.0).unwrap()
    }

    #[test]
    fn weights_and_totals() {
        let ds = two_clients();
        assert_eq!(ds.total(), 4);
        assert_eq!(ds.weights(), vec![0.25, 0.75]);
        assert!((ds.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(ds.offsets(), vec![0, 1]);
        assert_eq!(
            ds.stacked_true_values().unwrap().as_slice(),
            &[1.0, 3.0, 6.0, 9.0]
        );
    }

    #[test]
    fn rejects_bad_shapes() {
        let k = KernelSpec::Linear { dim: 2 };
        let c = ClientData::new(DMatrix::zeros(2, 1), DVector::zeros(2));
        assert!(matches!(
            FederatedDataset::new(k.clone(), vec![c], 0.1),
            Err(Error::InputShape(_))
        ));
        let c = ClientData::new(DMatrix::zeros(0, 2), DVector::zeros(0));
        assert!(matches!(
            FederatedDataset::new(k.clone(), vec![c], 0.1),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            FederatedDataset::new(k, vec![], 0.1),
            Err(Error::EmptyInput(_))
        ));
    }
}
