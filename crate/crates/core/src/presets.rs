//! Named scenarios shipped with the tool.
//!
//! Every preset mixes two kinds of link on a 1 km square:
//!
//! * short links (70 to 90 m) packed into clusters, assigned channel 0, which
//!   succeed at the lowest power level;
//! * long links (235 to 255 m) whose transmitter has no other receiver within
//!   400 m, assigned channel 1, which need the middle power level.
//!
//! An agent never observes its own link length, only the distances to other
//! receivers, so neighbourhood density is what tells a shared model which kind
//! of link it is driving. The gap between "some receiver within 120 m" and
//! "none within 400 m" is kept wide on purpose: with a narrow gap the averaged
//! model stays almost state-independent. Layouts come from seeded rejection
//! sampling and are fixed for a given preset name.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::net_model::{
    ChannelParams, MobilityParams, NetworkScenario, Position, TxRxPair, SCENARIO_SCHEMA_VERSION,
};

pub const AREA: f64 = 1000.0;
const MARGIN: f64 = 30.0;
const SHORT_LINK: (f64, f64) = (70.0, 90.0);
const LONG_LINK: (f64, f64) = (235.0, 255.0);
const CLUSTER_RADIUS: f64 = 50.0;
/// Closest any other receiver may be to a long link's transmitter.
const LONG_ISOLATION: f64 = 400.0;
/// Closest a short link's transmitter may be to a long link's receiver.
const LONG_RX_CLEARANCE: f64 = 150.0;
/// Closest a foreign transmitter may be to any receiver.
const RX_CLEARANCE: f64 = 55.0;
/// A short link's nearest foreign receiver must fall in this range.
const SHORT_NEIGHBOUR: (f64, f64) = (60.0, 120.0);
pub const MOBILITY_STEP: f64 = 0.3;

pub const PRESET_NAMES: [&str; 8] = [
    "six_pair",
    "gen_train_1",
    "gen_train_2",
    "gen_train_3",
    "gen_train_4",
    "gen_train_5",
    "unseen_10",
    "unseen_15",
];

/// The five scenarios of the generalized protocol.
pub const GENERALIZED_SET: [&str; 5] = [
    "gen_train_1",
    "gen_train_2",
    "gen_train_3",
    "gen_train_4",
    "gen_train_5",
];

struct Layout {
    /// Short links per cluster, cluster centers in meters.
    clusters: &'static [(f64, f64, usize)],
    n_long: usize,
    seed: u64,
}

fn layout(name: &str) -> Option<Layout> {
    let l = match name {
        "six_pair" => Layout {
            clusters: &[(500.0, 500.0, 3)],
            n_long: 3,
            seed: 6,
        },
        "gen_train_1" => Layout {
            clusters: &[(500.0, 500.0, 2)],
            n_long: 2,
            seed: 11,
        },
        "gen_train_2" => Layout {
            clusters: &[(480.0, 520.0, 4)],
            n_long: 1,
            seed: 12,
        },
        "gen_train_3" => Layout {
            clusters: &[(500.0, 500.0, 2)],
            n_long: 4,
            seed: 13,
        },
        "gen_train_4" => Layout {
            clusters: &[(440.0, 440.0, 2), (560.0, 560.0, 2)],
            n_long: 3,
            seed: 14,
        },
        "gen_train_5" => Layout {
            clusters: &[(440.0, 560.0, 3), (560.0, 440.0, 2)],
            n_long: 3,
            seed: 15,
        },
        "unseen_10" => Layout {
            clusters: &[(440.0, 500.0, 3), (560.0, 500.0, 3)],
            n_long: 4,
            seed: 100,
        },
        "unseen_15" => Layout {
            clusters: &[(430.0, 450.0, 4), (570.0, 450.0, 4), (500.0, 570.0, 3)],
            n_long: 4,
            seed: 150,
        },
        _ => return None,
    };
    Some(l)
}

fn inside(p: Position) -> bool {
    (MARGIN..=AREA - MARGIN).contains(&p.x) && (MARGIN..=AREA - MARGIN).contains(&p.y)
}

fn endpoint(rng: &mut ChaCha8Rng, tx: Position, range: (f64, f64)) -> Position {
    let len = rng.gen_range(range.0..=range.1);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    Position::new(tx.x + len * angle.cos(), tx.y + len * angle.sin())
}

#[derive(Clone, Copy)]
struct Link {
    tx: Position,
    rx: Position,
    long: bool,
}

fn consistent(links: &[Link]) -> bool {
    for (i, a) in links.iter().enumerate() {
        let others = links
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, b)| b);
        let nearest_rx = others
            .clone()
            .map(|b| a.tx.distance(&b.rx))
            .fold(f64::INFINITY, f64::min);
        let nearest_tx = others
            .map(|b| a.rx.distance(&b.tx))
            .fold(f64::INFINITY, f64::min);
        if nearest_tx < RX_CLEARANCE {
            return false;
        }
        if a.long && nearest_rx < LONG_ISOLATION {
            return false;
        }
        if !a.long
            && links
                .iter()
                .any(|b| b.long && a.tx.distance(&b.rx) < LONG_RX_CLEARANCE)
        {
            return false;
        }
    }
    true
}

fn short_neighbours_ok(links: &[Link]) -> bool {
    links
        .iter()
        .enumerate()
        .filter(|(_, a)| !a.long)
        .all(|(i, a)| {
            let nearest = links
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| a.tx.distance(&b.rx))
                .fold(f64::INFINITY, f64::min);
            (SHORT_NEIGHBOUR.0..=SHORT_NEIGHBOUR.1).contains(&nearest)
        })
}

fn sample_links(l: &Layout) -> Vec<Link> {
    let mut rng = ChaCha8Rng::seed_from_u64(l.seed);
    'restart: loop {
        let mut links: Vec<Link> = Vec::new();
        for &(cx, cy, n) in l.clusters {
            for _ in 0..n {
                let placed = (0..2000).find_map(|_| {
                    let r = CLUSTER_RADIUS * rng.gen::<f64>().sqrt();
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let tx = Position::new(cx + r * a.cos(), cy + r * a.sin());
                    let rx = endpoint(&mut rng, tx, SHORT_LINK);
                    let link = Link {
                        tx,
                        rx,
                        long: false,
                    };
                    let mut trial = links.clone();
                    trial.push(link);
                    (inside(tx) && inside(rx) && consistent(&trial)).then_some(link)
                });
                match placed {
                    Some(link) => links.push(link),
                    None => continue 'restart,
                }
            }
        }
        for _ in 0..l.n_long {
            let placed = (0..5000).find_map(|_| {
                let tx = Position::new(
                    rng.gen_range(MARGIN..AREA - MARGIN),
                    rng.gen_range(MARGIN..AREA - MARGIN),
                );
                let rx = endpoint(&mut rng, tx, LONG_LINK);
                let link = Link { tx, rx, long: true };
                let mut trial = links.clone();
                trial.push(link);
                (inside(rx) && consistent(&trial)).then_some(link)
            });
            match placed {
                Some(link) => links.push(link),
                None => continue 'restart,
            }
        }
        if short_neighbours_ok(&links) {
            return links;
        }
    }
}

fn round(p: Position) -> Position {
    Position::new((p.x * 10.0).round() / 10.0, (p.y * 10.0).round() / 10.0)
}

/// Builds the preset called `name`, or `None` for an unknown name.
pub fn preset(name: &str) -> Option<NetworkScenario> {
    let l = layout(name)?;
    let pairs = sample_links(&l)
        .into_iter()
        .enumerate()
        .map(|(pair_id, link)| TxRxPair {
            pair_id,
            tx_pos: round(link.tx),
            rx_pos: round(link.rx),
            assigned_frequency: link.long as usize,
        })
        .collect();
    Some(NetworkScenario {
        schema_version: SCENARIO_SCHEMA_VERSION,
        name: name.to_string(),
        pairs,
        area_w: AREA,
        area_h: AREA,
        channel: ChannelParams::default(),
        mobility: MobilityParams {
            step_size: MOBILITY_STEP,
            enabled: true,
        },
        power_levels_dbm: vec![1.0, 10.0, 20.0],
        n_f: 2,
        seed: l.seed,
    })
}

/// Every preset, in [`PRESET_NAMES`] order.
pub fn preset_scenarios() -> Vec<NetworkScenario> {
    PRESET_NAMES
        .iter()
        .map(|n| preset(n).expect("listed preset exists"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net_model::{compute_sinr, transmission_success, Transmission};

    #[test]
    fn counts() {
        let six = preset("six_pair").unwrap();
        assert_eq!((six.n_pairs(), six.n_p(), six.n_f), (6, 3, 2));
        assert_eq!(preset("unseen_10").unwrap().n_pairs(), 10);
        assert_eq!(preset("unseen_15").unwrap().n_pairs(), 15);
        let sizes: Vec<usize> = GENERALIZED_SET
            .iter()
            .map(|n| preset(n).unwrap().n_pairs())
            .collect();
        assert!(sizes.iter().all(|s| (4..=8).contains(s)));
        assert!(sizes.windows(2).any(|w| w[0] != w[1]));
        assert!(preset("nope").is_none());
    }

    #[test]
    fn all_validate_and_are_stable() {
        for sc in preset_scenarios() {
            sc.validate().unwrap();
            assert_eq!(preset(&sc.name).unwrap(), sc);
        }
    }

    #[test]
    fn frequency_mix_varies() {
        let shares: Vec<usize> = GENERALIZED_SET
            .iter()
            .map(|n| {
                preset(n)
                    .unwrap()
                    .pairs
                    .iter()
                    .filter(|p| p.assigned_frequency == 1)
                    .count()
            })
            .collect();
        assert!(shares.windows(2).any(|w| w[0] != w[1]));
    }

    // With every pair on its assigned channel, short links succeed at the
    // lowest level and long links need the middle one.
    #[test]
    fn power_requirements_follow_link_kind() {
        for sc in preset_scenarios() {
            let positions = sc.initial_positions();
            for low in [true, false] {
                let tx: Vec<Transmission> = sc
                    .pairs
                    .iter()
                    .map(|p| Transmission {
                        power_index: if low { 0 } else { p.assigned_frequency },
                        frequency_index: p.assigned_frequency,
                        transmitting: true,
                    })
                    .collect();
                for p in &sc.pairs {
                    let ok = transmission_success(
                        compute_sinr(&sc, &positions, &tx, p.pair_id).unwrap(),
                        &sc.channel,
                    );
                    let long = p.assigned_frequency == 1;
                    assert_eq!(ok, !(low && long), "{} pair {}", sc.name, p.pair_id);
                }
            }
        }
    }
}
