//! Hidden analytic rewards that stand in for a human labeler.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::pairs::{LabelSource, PreferenceLabel, QueryPair, Side};

/// Rewards closer than this are a tie and produce no label.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    /// Mean action magnitude.
    Speed,
    /// Negative mean magnitude of successive action differences.
    Smoothness,
    /// Mean signed cross product of successive displacements; positive is
    /// counter-clockwise.
    Curl,
}

impl OracleKind {
    pub const ALL: [OracleKind; 3] = [OracleKind::Speed, OracleKind::Smoothness, OracleKind::Curl];

    pub fn name(self) -> &'static str {
        match self {
            OracleKind::Speed => "speed",
            OracleKind::Smoothness => "smoothness",
            OracleKind::Curl => "curl",
        }
    }
}

impl std::str::FromStr for OracleKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OracleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| crate::Error::Config(format!("unknown oracle {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub kind: OracleKind,
    /// `+1` or `-1`.
    pub sign: i8,
}

impl OracleSpec {
    pub fn new(kind: OracleKind, sign: i8) -> Self {
        assert!(sign == 1 || sign == -1, "oracle sign must be +1 or -1");
        Self { kind, sign }
    }

    pub fn flipped(self) -> Self {
        Self {
            kind: self.kind,
            sign: -self.sign,
        }
    }

    /// Reward of a segment in environment units (`H x (S + A)`).
    pub fn reward(&self, seg: ArrayView2<f64>, state_dim: usize) -> f64 {
        let h = seg.nrows();
        let raw = match self.kind {
            OracleKind::Speed => {
                let actions = seg.slice(ndarray::s![.., state_dim..]);
                actions.outer_iter().map(|a| a.dot(&a).sqrt()).sum::<f64>() / h as f64
            }
            OracleKind::Smoothness => {
                if h < 2 {
                    0.0
                } else {
                    let actions = seg.slice(ndarray::s![.., state_dim..]);
                    let total: f64 = (1..h)
                        .map(|t| {
                            let d = &actions.row(t) - &actions.row(t - 1);
                            d.dot(&d).sqrt()
                        })
                        .sum();
                    -total / (h - 1) as f64
                }
            }
            OracleKind::Curl => {
                if h < 3 {
                    0.0
                } else {
                    let disp = |t: usize| {
                        (
                            seg[[t + 1, 0]] - seg[[t, 0]],
                            seg[[t + 1, 1.min(state_dim - 1)]] - seg[[t, 1.min(state_dim - 1)]],
                        )
                    };
                    let total: f64 = (0..h - 2)
                        .map(|t| {
                            let (ax, ay) = disp(t);
                            let (bx, by) = disp(t + 1);
                            ax * by - ay * bx
                        })
                        .sum();
                    total / (h - 2) as f64
                }
            }
        };
        f64::from(self.sign) * raw
    }
}

/// Winner is the strictly higher-reward segment; ties yield `None`.
pub fn oracle_label(
    pair: &QueryPair,
    oracle: &OracleSpec,
    state_dim: usize,
) -> Option<PreferenceLabel> {
    let ra = oracle.reward(pair.a.matrix.view(), state_dim);
    let rb = oracle.reward(pair.b.matrix.view(), state_dim);
    if (ra - rb).abs() < TIE_TOLERANCE {
        debug!(pair = %pair.pair_id, "tied oracle rewards; pair skipped");
        return None;
    }
    Some(PreferenceLabel {
        pair_id: pair.pair_id.clone(),
        winner: if ra > rb { Side::A } else { Side::B },
        source: LabelSource::Oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Segment, SegmentRef};
    use ndarray::Array2;

    fn straight(speed: f64, h: usize) -> Array2<f64> {
        let mut m = Array2::zeros((h, 4));
        for t in 0..h {
            m[[t, 0]] = t as f64 * 0.1 * speed;
            m[[t, 2]] = speed;
        }
        m
    }

    fn seg(m: Array2<f64>, episode_id: usize) -> Segment {
        Segment {
            matrix: m,
            source: SegmentRef {
                episode_id,
                start: 0,
            },
        }
    }

    #[test]
    fn fast_beats_slow_on_speed() {
        let pair = QueryPair {
            pair_id: "p".into(),
            a: seg(straight(0.9, 16), 0),
            b: seg(straight(0.3, 16), 1),
        };
        let speed = OracleSpec::new(OracleKind::Speed, 1);
        assert!((speed.reward(pair.a.matrix.view(), 2) - 0.9).abs() < 1e-12);
        assert_eq!(oracle_label(&pair, &speed, 2).unwrap().winner, Side::A);
        assert_eq!(
            oracle_label(&pair, &speed.flipped(), 2).unwrap().winner,
            Side::B
        );
    }

    #[test]
    fn identical_segments_tie() {
        let m = straight(0.5, 16);
        let pair = QueryPair {
            pair_id: "p".into(),
            a: seg(m.clone(), 0),
            b: seg(m, 0),
        };
        for kind in OracleKind::ALL {
            assert!(oracle_label(&pair, &OracleSpec::new(kind, 1), 2).is_none());
        }
    }

    #[test]
    fn curl_sign_follows_rotation() {
        let h = 12;
        let circle = |dir: f64| {
            let mut m = Array2::zeros((h, 4));
            for t in 0..h {
                let th = dir * t as f64 * 0.2;
                m[[t, 0]] = th.cos();
                m[[t, 1]] = th.sin();
            }
            m
        };
        let curl = OracleSpec::new(OracleKind::Curl, 1);
        assert!(curl.reward(circle(1.0).view(), 2) > 0.0);
        assert!(curl.reward(circle(-1.0).view(), 2) < 0.0);
    }

    #[test]
    fn action_oracles_ignore_translation() {
        let mut m = straight(0.7, 16);
        m[[3, 2]] = 0.1;
        m[[5, 3]] = -0.4;
        let mut shifted = m.clone();
        shifted.column_mut(0).mapv_inplace(|x| x + 5.0);
        shifted.column_mut(1).mapv_inplace(|x| x - 2.0);
        for kind in [OracleKind::Speed, OracleKind::Smoothness] {
            let o = OracleSpec::new(kind, 1);
            assert_eq!(o.reward(m.view(), 2), o.reward(shifted.view(), 2));
        }
    }

    #[test]
    fn parse_kind() {
        assert_eq!("curl".parse::<OracleKind>().unwrap(), OracleKind::Curl);
        assert!("height".parse::<OracleKind>().is_err());
    }
}
