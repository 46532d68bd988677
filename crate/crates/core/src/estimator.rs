//! Auxiliary loss estimator and its pairwise ranking objective.
//!
//! The head reads the four stage outputs of the predictor, pools each one
//! spatially, passes it through its own affine map + ReLU, and fuses the
//! concatenation into a single scalar. A final softplus keeps `ℓ̂` non-negative
//! like the loss it stands in for, so pulling it towards a target of 0 always
//! means lowering it. It is trained to order samples the same way their true
//! cross-entropy losses are ordered; absolute values carry no calibration.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::model::{BlockTaps, NUM_STAGES};
use crate::nn::{self, Linear, ParamStore, DEVICE};

pub const DEFAULT_HIDDEN_DIM: usize = 128;
pub const DEFAULT_MARGIN: f64 = 1.0;
pub const DEFAULT_BETA_PRIMARY: f64 = 1.0;
pub const DEFAULT_BETA_AUX: f64 = 0.5;

#[derive(Debug)]
pub struct LossEstimatorHead {
    store: ParamStore,
    transforms: Vec<Linear>,
    fusion: Linear,
    hidden_dim: usize,
    tap_channels: [usize; NUM_STAGES],
    trained: bool,
}

impl LossEstimatorHead {
    pub fn new(
        tap_channels: [usize; NUM_STAGES],
        hidden_dim: usize,
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        if hidden_dim == 0 || tap_channels.contains(&0) {
            return Err(Error::input("loss estimator dimensions must be positive"));
        }
        let mut store = ParamStore::new(dtype, seed);
        let transforms = tap_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(&mut store, &format!("tap{}", i + 1), c, hidden_dim))
            .collect::<Result<Vec<_>>>()?;
        let fusion = Linear::new(&mut store, "fusion", NUM_STAGES * hidden_dim, 1)?;
        Ok(Self {
            store,
            transforms,
            fusion,
            hidden_dim,
            tap_channels,
            trained: false,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn tap_channels(&self) -> [usize; NUM_STAGES] {
        self.tap_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Declare the head usable as a regularizer: set by joint training and
    /// by checkpoint loading.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// `ℓ̂` for a batch of NCHW stage outputs: `(batch,)`.
    pub fn forward_tensor(&self, taps: &[Tensor]) -> Result<Tensor> {
        if taps.len() != NUM_STAGES {
            return Err(Error::input(format!(
                "loss estimator needs {NUM_STAGES} taps, got {}",
                taps.len()
            )));
        }
        let mut hidden = Vec::with_capacity(NUM_STAGES);
        for (i, (tap, transform)) in taps.iter().zip(&self.transforms).enumerate() {
            let (_, c, _, _) = tap.dims4()?;
            if c != transform.in_features() {
                return Err(Error::input(format!(
                    "tap {} has {c} channels, head expects {}",
                    i + 1,
                    transform.in_features()
                )));
            }
            hidden.push(transform.forward(&nn::global_avg_pool(tap)?)?.relu()?);
        }
        let fused = Tensor::cat(&hidden, 1)?;
        nn::softplus(&self.fusion.forward(&fused)?.squeeze(1)?)
    }
}

/// Scalar loss estimate for the taps of one image.
pub fn estimate_loss(taps: &BlockTaps, head: &LossEstimatorHead) -> Result<f64> {
    let ts = taps
        .maps
        .iter()
        .map(|m| Ok(m.tensor().to_dtype(head.store.dtype())?.unsqueeze(0)?))
        .collect::<Result<Vec<_>>>()?;
    let value = nn::scalar(&head.forward_tensor(&ts)?.squeeze(0)?)?;
    if !value.is_finite() {
        return Err(Error::numerical("loss estimate is not finite", Vec::new()));
    }
    Ok(value)
}

/// Which index pairs `(i, j)` of a batch enter the ranking objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pairing {
    /// A batch of `2m` samples is split into partners `i` and `i + m`;
    /// both orderings of each partnership are scored.
    Halves,
    /// Every ordered pair `i != j`.
    AllPairs,
}

impl Pairing {
    pub fn pairs(self, len: usize) -> Result<Vec<(usize, usize)>> {
        let pairs: Vec<_> = match self {
            Pairing::Halves => {
                if !len.is_multiple_of(2) {
                    return Err(Error::input(format!(
                        "half pairing needs an even batch, got {len}"
                    )));
                }
                let m = len / 2;
                (0..m).flat_map(|i| [(i, i + m), (i + m, i)]).collect()
            }
            Pairing::AllPairs => (0..len)
                .flat_map(|i| (0..len).filter(move |&j| j != i).map(move |j| (i, j)))
                .collect(),
        };
        if pairs.is_empty() {
            return Err(Error::input("ranking loss needs at least one pair"));
        }
        Ok(pairs)
    }

    pub fn name(self) -> &'static str {
        match self {
            Pairing::Halves => "halves",
            Pairing::AllPairs => "all_pairs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "halves" => Ok(Pairing::Halves),
            "all_pairs" => Ok(Pairing::AllPairs),
            other => Err(Error::input(format!("unknown pairing `{other}`"))),
        }
    }
}

fn indicator(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else {
        0.0
    }
}

/// Mean over pairs of `max(0, -I(ℓi, ℓj) * (ℓ̂i - ℓ̂j) + margin)`, where
/// `I = 1` when `ℓi > ℓj` and `0` otherwise.
///
/// Pairs with `I = 0` contribute the constant `max(0, margin)`.
pub fn ranking_loss(
    true_losses: &[f64],
    estimates: &[f64],
    margin: f64,
    pairing: Pairing,
) -> Result<f64> {
    ranking_loss_over(true_losses, estimates, margin, &pairing.pairs(true_losses.len())?)
}

/// [`ranking_loss`] over an explicit list of ordered pairs.
pub fn ranking_loss_over(
    true_losses: &[f64],
    estimates: &[f64],
    margin: f64,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    if true_losses.len() != estimates.len() {
        return Err(Error::input(format!(
            "{} true losses but {} estimates",
            true_losses.len(),
            estimates.len()
        )));
    }
    if pairs.is_empty() {
        return Err(Error::input("ranking loss needs at least one pair"));
    }
    let n = true_losses.len();
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(Error::input(format!("pair ({i}, {j}) out of range for {n} samples")));
    }
    let mut sum = 0.0;
    for &(i, j) in pairs {
        let ind = indicator(true_losses[i], true_losses[j]);
        sum += f64::max(0.0, -ind * (estimates[i] - estimates[j]) + margin);
    }
    Ok(sum / pairs.len() as f64)
}

/// Differentiable form of [`ranking_loss`] w.r.t. `estimates` (`(batch,)`).
/// The true losses enter as constants.
pub fn ranking_loss_tensor(
    true_losses: &[f64],
    estimates: &Tensor,
    margin: f64,
    pairing: Pairing,
) -> Result<Tensor> {
    let n = estimates.dims1()?;
    if true_losses.len() != n {
        return Err(Error::input(format!(
            "{} true losses but {n} estimates",
            true_losses.len()
        )));
    }
    let pairs = pairing.pairs(n)?;
    let first: Vec<u32> = pairs.iter().map(|p| p.0 as u32).collect();
    let second: Vec<u32> = pairs.iter().map(|p| p.1 as u32).collect();
    let ind: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| indicator(true_losses[i], true_losses[j]))
        .collect();
    let first = Tensor::from_vec(first, pairs.len(), &DEVICE)?;
    let second = Tensor::from_vec(second, pairs.len(), &DEVICE)?;
    let ind = Tensor::from_vec(ind, pairs.len(), &DEVICE)?.to_dtype(estimates.dtype())?;
    let diff = (estimates.index_select(&first, 0)? - estimates.index_select(&second, 0)?)?;
    let hinge = (ind.mul(&diff)?.neg()? + margin)?.relu()?;
    Ok(hinge.mean_all()?)
}

/// `β1 · L_pri + β2 · L_aux`.
pub fn total_loss(primary: f64, aux: f64, beta_primary: f64, beta_aux: f64) -> f64 {
    beta_primary * primary + beta_aux * aux
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input has no rank variance.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input("rank correlation inputs differ in length"));
    }
    if a.len() < 2 {
        return Ok(0.0);
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}
