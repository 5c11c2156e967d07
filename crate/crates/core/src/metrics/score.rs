use serde::{Deserialize, Serialize};

use super::critic::{critic_weights, normalize};
use super::MetricsError;

/// Normalized indicators of one route, each in `[0, 1]`. `energy` grows
/// with the raw energy per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Indicators {
    pub ds: f64,
    pub de: f64,
    pub dc: f64,
    pub energy: f64,
}

impl Indicators {
    fn as_vec(&self) -> Vec<f64> {
        vec![self.ds, self.de, self.dc, self.energy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub ds: f64,
    pub de: f64,
    pub dc: f64,
    pub energy: f64,
}

impl Weights {
    pub fn from_slice(w: &[f64]) -> Self {
        Self {
            ds: w[0],
            de: w[1],
            dc: w[2],
            energy: w[3],
        }
    }

    pub fn sum(&self) -> f64 {
        self.ds + self.de + self.dc + self.energy
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        let all = [self.ds, self.de, self.dc, self.energy];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(MetricsError::InvalidWeights(format!(
                "{all:?} has a negative entry"
            )));
        }
        if (self.sum() - 1.0).abs() > 1e-9 {
            return Err(MetricsError::InvalidWeights(format!(
                "{all:?} does not sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsMode {
    Critic,
    Fixed(Weights),
}

/// How the energy term enters the route score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergySign {
    /// Energy is subtracted, so higher energy lowers the score.
    #[default]
    Negative,
    /// Energy is added to the score.
    Positive,
    /// Report both; the primary score uses `Negative`.
    Both,
}

/// `Q = w_ds·x_ds + C·(w_de·x_de + w_dc·x_dc ∓ w_e·x_e)` with `C = 0` for
/// crashed routes.
pub fn route_score(x: &Indicators, w: &Weights, crashed: bool, sign: EnergySign) -> f64 {
    let energy = match sign {
        EnergySign::Positive => w.energy * x.energy,
        EnergySign::Negative | EnergySign::Both => -w.energy * x.energy,
    };
    let gate = if crashed { 0.0 } else { 1.0 };
    w.ds * x.ds + gate * (w.de * x.de + w.dc * x.dc + energy)
}

/// `scale · mean(q)`.
pub fn eer_av(q_scores: &[f64], scale: f64) -> Result<f64, MetricsError> {
    if q_scores.is_empty() {
        return Err(MetricsError::NoRoutes);
    }
    Ok(scale * q_scores.iter().sum::<f64>() / q_scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteMetrics {
    pub route: String,
    pub ds: f64,
    /// `None` when the route is excluded from efficiency statistics.
    pub de: Option<f64>,
    /// `None` when the route is excluded from comfort statistics.
    pub dc: Option<f64>,
    pub energy_per_frame_j: f64,
    pub crashed: bool,
    pub mean_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean_ds: f64,
    pub mean_de: Option<f64>,
    pub mean_dc: Option<f64>,
    pub mean_energy_per_frame_j: f64,
    pub crash_rate: f64,
    /// `1 / mean latency`.
    pub fps: f64,
    /// `mean energy per frame · fps`.
    pub power_w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub routes: Vec<RouteMetrics>,
    pub weights: Weights,
    pub normalized: Vec<Indicators>,
    pub q_scores: Vec<f64>,
    pub eer_av: f64,
    /// Score with the energy term added, present for `EnergySign::Both`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eer_av_positive_energy: Option<f64>,
    pub route_count: usize,
    pub summary: Summary,
}

impl EvaluationReport {
    /// `route,ds,de,dc,energy,crashed,q` rows; excluded values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("route,ds,de,dc,energy,crashed,q\n");
        for (r, q) in self.routes.iter().zip(&self.q_scores) {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.route,
                r.ds,
                opt(r.de),
                opt(r.dc),
                r.energy_per_frame_j,
                r.crashed,
                q
            ));
        }
        s
    }
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

/// Excluded entries take the mean of the present ones; a fully excluded
/// column becomes constant.
fn impute(values: &[Option<f64>]) -> Vec<f64> {
    let fill = mean_present(values).unwrap_or(0.0);
    values.iter().map(|v| v.unwrap_or(fill)).collect()
}

fn summarize(routes: &[RouteMetrics]) -> Summary {
    let n = routes.len().max(1) as f64;
    let mean_latency = routes.iter().map(|r| r.mean_latency_s).sum::<f64>() / n;
    let fps = if mean_latency > 0.0 {
        1.0 / mean_latency
    } else {
        0.0
    };
    let mean_energy = routes.iter().map(|r| r.energy_per_frame_j).sum::<f64>() / n;
    Summary {
        mean_ds: routes.iter().map(|r| r.ds).sum::<f64>() / n,
        mean_de: mean_present(&routes.iter().map(|r| r.de).collect::<Vec<_>>()),
        mean_dc: mean_present(&routes.iter().map(|r| r.dc).collect::<Vec<_>>()),
        mean_energy_per_frame_j: mean_energy,
        crash_rate: routes.iter().filter(|r| r.crashed).count() as f64 / n,
        fps,
        power_w: mean_energy * fps,
    }
}

/// Scores several route groups on one shared normalization and weighting.
/// Each group gets its own report; weights and indicator ranges come from
/// the union of all groups.
pub fn evaluate_joint(
    groups: &[Vec<RouteMetrics>],
    mode: &WeightsMode,
    sign: EnergySign,
) -> Result<Vec<EvaluationReport>, MetricsError> {
    let all: Vec<&RouteMetrics> = groups.iter().flatten().collect();
    if all.is_empty() {
        return Err(MetricsError::NoRoutes);
    }
    let ds = normalize(&all.iter().map(|r| r.ds).collect::<Vec<_>>(), true);
    let de = normalize(&impute(&all.iter().map(|r| r.de).collect::<Vec<_>>()), true);
    let dc = normalize(&impute(&all.iter().map(|r| r.dc).collect::<Vec<_>>()), true);
    let energy = normalize(
        &all.iter().map(|r| r.energy_per_frame_j).collect::<Vec<_>>(),
        true,
    );
    let x: Vec<Indicators> = (0..all.len())
        .map(|i| Indicators {
            ds: ds[i],
            de: de[i],
            dc: dc[i],
            energy: energy[i],
        })
        .collect();
    let weights = match mode {
        WeightsMode::Critic => Weights::from_slice(&critic_weights(
            &x.iter().map(Indicators::as_vec).collect::<Vec<_>>(),
        )?),
        WeightsMode::Fixed(w) => {
            w.validate()?;
            *w
        }
    };
    let mut reports = Vec::with_capacity(groups.len());
    let mut offset = 0;
    for group in groups {
        let xs = x[offset..offset + group.len()].to_vec();
        offset += group.len();
        let q_with = |s: EnergySign| -> Vec<f64> {
            xs.iter()
                .zip(group)
                .map(|(xi, r)| route_score(xi, &weights, r.crashed, s))
                .collect()
        };
        let q_scores = q_with(sign);
        let eer_av_positive_energy = match sign {
            EnergySign::Both => Some(eer_av(&q_with(EnergySign::Positive), 100.0)?),
            _ => None,
        };
        reports.push(EvaluationReport {
            eer_av: eer_av(&q_scores, 100.0)?,
            eer_av_positive_energy,
            route_count: group.len(),
            summary: summarize(group),
            routes: group.clone(),
            weights,
            normalized: xs,
            q_scores,
        });
    }
    Ok(reports)
}

pub fn evaluate(
    routes: Vec<RouteMetrics>,
    mode: &WeightsMode,
    sign: EnergySign,
) -> Result<EvaluationReport, MetricsError> {
    Ok(evaluate_joint(&[routes], mode, sign)?.remove(0))
}
