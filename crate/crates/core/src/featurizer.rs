//! Feature extraction from packet timing and Tor connection logs.
//!
//! Indices 0-174 summarise the packet timing of a host's flows; 175-214
//! summarise its Tor connection records and DNS/onion counters. Aggregates
//! over empty lists are 0, standard deviations are population ones, and modes
//! break ties towards the smallest value.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::dataset::{percentile_sorted, NUM_FEATURES};
use crate::error::{Error, Result};

pub const NUM_CONNECTION_FEATURES: usize = 175;
pub const NUM_HOST_FEATURES: usize = 40;

/// Ports that do not count as non-standard.
pub const STANDARD_PORTS: [u16; 3] = [443, 9001, 9030];

/// Connections at most this long count as short.
pub const SHORT_CONNECTION_SECS: f64 = 60.0;

const CHUNK: usize = 20;
const EDGE_PACKETS: usize = 30;
const ALT_CONC_SLOTS: usize = 70;
const ALT_PPS_SLOTS: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "out")]
    Outgoing,
    #[serde(rename = "in")]
    Incoming,
}

/// One packet: seconds since flow start and direction. Serialised as
/// `[time, "in" | "out"]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketMeta(pub f64, pub Direction);

impl PacketMeta {
    pub fn time(self) -> f64 {
        self.0
    }

    pub fn direction(self) -> Direction {
        self.1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub packets: Vec<PacketMeta>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConnState {
    #[serde(rename = "established")]
    Established,
    S0,
    #[serde(rename = "REJ")]
    Rej,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorConnRecord {
    pub start: f64,
    pub duration: f64,
    pub pkts_sent: u64,
    pub pkts_recv: u64,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    pub dest_port: u16,
    pub state: ConnState,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HostSession {
    pub host_id: String,
    /// Ground-truth label cell (`A|B`) when the session is annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
    #[serde(default)]
    pub connections: Vec<TorConnRecord>,
    /// One per connection, same order; may be empty.
    #[serde(default)]
    pub flows: Vec<FlowTrace>,
    #[serde(default)]
    pub dns_nxdomain: u64,
    #[serde(default)]
    pub dns_refused: u64,
    #[serde(default)]
    pub dns_servfail: u64,
    #[serde(default)]
    pub onion_accesses: u64,
    #[serde(default)]
    pub unique_onion_domains: u64,
    #[serde(default)]
    pub rejected_onion_queries: u64,
    #[serde(default)]
    pub onion_domains_total: u64,
    #[serde(default)]
    pub consensus_links: u64,
    #[serde(default)]
    pub tor_keyword_urls: u64,
}

/// Reads one [`HostSession`] per non-blank line.
pub fn read_sessions<R: BufRead>(reader: R) -> Result<Vec<HostSession>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Data {
            row: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let session = serde_json::from_str(&line).map_err(|e| Error::Data {
            row: i + 1,
            message: e.to_string(),
        })?;
        out.push(session);
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn pct(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    percentile_sorted(&s, p)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().reduce(f64::max).unwrap_or(0.0)
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().reduce(f64::min).unwrap_or(0.0)
}

/// Most frequent value, smallest on ties; 0 for an empty list.
fn mode(v: &[f64]) -> f64 {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for x in v {
        // Map to an order-preserving key so the BTreeMap sorts numerically.
        let bits = x.to_bits();
        let key = if x.is_sign_negative() { !bits } else { bits | (1 << 63) };
        *counts.entry(key).or_insert(0) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    counts
        .into_iter()
        .find(|&(_, c)| c == best)
        .map_or(0.0, |(key, _)| {
            let bits = if key >> 63 == 1 { key & !(1 << 63) } else { !key };
            f64::from_bits(bits)
        })
}

fn diffs(times: &[f64]) -> Vec<f64> {
    times.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Sum-pools `v` into `slots` equal spans, or zero-pads when shorter.
fn resample(v: &[f64], slots: usize) -> Vec<f64> {
    if v.len() <= slots {
        let mut out = v.to_vec();
        out.resize(slots, 0.0);
        return out;
    }
    (0..slots)
        .map(|j| {
            let (a, b) = (j * v.len() / slots, (j + 1) * v.len() / slots);
            v[a..b].iter().sum()
        })
        .collect()
}

/// Connection-level features (indices 0-174) of one packet sequence.
pub fn connection_features(flow: &FlowTrace) -> Result<Vec<f64>> {
    let packets = &flow.packets;
    if packets.is_empty() {
        return Err(Error::invalid("cannot featurize an empty flow"));
    }
    for (i, p) in packets.iter().enumerate() {
        if !p.0.is_finite() || p.0 < 0.0 {
            return Err(Error::invalid(format!("packet {i} has invalid time {}", p.0)));
        }
        if i > 0 && p.0 < packets[i - 1].0 {
            return Err(Error::invalid(format!("packet {i} is earlier than its predecessor")));
        }
    }
    let mut f = vec![0.0; NUM_CONNECTION_FEATURES];

    let all: Vec<f64> = packets.iter().map(|p| p.0).collect();
    let pick = |d: Direction| -> Vec<f64> { packets.iter().filter(|p| p.1 == d).map(|p| p.0).collect() };
    let out = pick(Direction::Outgoing);
    let inc = pick(Direction::Incoming);

    for (g, times) in [&all, &out, &inc].into_iter().enumerate() {
        let ia = diffs(times);
        f[4 * g..4 * g + 4].copy_from_slice(&[max(&ia), mean(&ia), std(&ia), pct(&ia, 75.0)]);
        let q = [25.0, 50.0, 75.0, 100.0].map(|p| pct(times, p));
        f[12 + 4 * g..16 + 4 * g].copy_from_slice(&q);
    }

    let n = packets.len();
    f[24] = n as f64;
    f[25] = out.len() as f64;
    f[26] = inc.len() as f64;
    let count = |ps: &[PacketMeta], d: Direction| ps.iter().filter(|p| p.1 == d).count() as f64;
    let first = &packets[..n.min(EDGE_PACKETS)];
    let last = &packets[n.saturating_sub(EDGE_PACKETS)..];
    f[27] = count(first, Direction::Outgoing);
    f[28] = count(first, Direction::Incoming);
    f[29] = count(last, Direction::Outgoing);
    f[30] = count(last, Direction::Incoming);

    let conc: Vec<f64> = packets.chunks(CHUNK).map(|c| count(c, Direction::Outgoing)).collect();
    f[31] = std(&conc);
    f[32] = mean(&conc);
    f[39] = pct(&conc, 50.0);
    f[43] = max(&conc);

    let mut pps = vec![0.0; all[n - 1].floor() as usize + 1];
    for t in &all {
        pps[t.floor() as usize] += 1.0;
    }
    f[33] = mean(&pps);
    f[34] = std(&pps);
    f[40] = pct(&pps, 50.0);
    f[41] = min(&pps);
    f[42] = max(&pps);

    let order = |d: Direction| -> Vec<f64> {
        packets.iter().enumerate().filter(|(_, p)| p.1 == d).map(|(i, _)| i as f64).collect()
    };
    let (out_order, in_order) = (order(Direction::Outgoing), order(Direction::Incoming));
    f[35] = mean(&out_order);
    f[36] = mean(&in_order);
    f[37] = std(&out_order);
    f[38] = std(&in_order);

    f[44] = 100.0 * inc.len() as f64 / n as f64;
    f[45] = 100.0 * out.len() as f64 / n as f64;

    let alt_conc = resample(&conc, ALT_CONC_SLOTS);
    f[46..46 + ALT_CONC_SLOTS].copy_from_slice(&alt_conc);
    f[116] = conc.len() as f64;
    let mut alt_pps = pps.clone();
    alt_pps.resize(ALT_PPS_SLOTS.max(pps.len()), 0.0);
    f[117..117 + ALT_PPS_SLOTS].copy_from_slice(&alt_pps[..ALT_PPS_SLOTS]);

    f[138] = f[46..116].iter().sum();
    f[139] = f[117..138].iter().sum();
    f[140] = f[0..12].iter().sum();
    f[141] = f[12..24].iter().sum();
    f[142] = f[24..27].iter().sum();
    Ok(f)
}

/// Host-level features (indices 175-214) of a session.
pub fn host_features(session: &HostSession) -> Vec<f64> {
    let mut f = vec![0.0; NUM_HOST_FEATURES];
    let at = |i: usize| i - NUM_CONNECTION_FEATURES;
    let conns = &session.connections;

    if !conns.is_empty() {
        let failed = conns.iter().filter(|c| c.state != ConnState::Established).count() as f64;
        let first = min(&conns.iter().map(|c| c.start).collect::<Vec<_>>());
        let end = max(&conns.iter().map(|c| c.start + c.duration).collect::<Vec<_>>());
        let span = end - first;
        f[at(175)] = conns.len() as f64;
        f[at(176)] = failed;
        if span > 0.0 {
            f[at(177)] = conns.len() as f64 / span;
            f[at(178)] = failed / span;
        }

        let ports: Vec<f64> = conns.iter().map(|c| f64::from(c.dest_port)).collect();
        let non_std: Vec<f64> = conns
            .iter()
            .filter(|c| !STANDARD_PORTS.contains(&c.dest_port))
            .map(|c| f64::from(c.dest_port))
            .collect();
        let distinct = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<BTreeSet<_>>().len() as f64;
        f[at(179)] = distinct(&ports);
        f[at(180)] = mode(&ports);
        f[at(181)] = distinct(&non_std);
        f[at(182)] = mode(&non_std);

        let durations: Vec<f64> = conns.iter().map(|c| c.duration).collect();
        f[at(183)] = mean(&durations);
        f[at(184)] = min(&durations);
        f[at(185)] = max(&durations);
        f[at(186)] = durations.iter().filter(|&&d| d <= SHORT_CONNECTION_SECS).count() as f64;

        let mut starts: Vec<f64> = conns.iter().map(|c| c.start).collect();
        starts.sort_by(f64::total_cmp);
        f[at(187)] = mean(&diffs(&starts));

        let totals: [fn(&TorConnRecord) -> u64; 6] = [
            |c| c.pkts_sent + c.pkts_recv,
            |c| c.bytes_sent + c.bytes_recv,
            |c| c.bytes_sent,
            |c| c.pkts_sent,
            |c| c.pkts_recv,
            |c| c.bytes_recv,
        ];
        for (g, total) in totals.iter().enumerate() {
            let v: Vec<f64> = conns.iter().map(|c| total(c) as f64).collect();
            let base = at(188) + 3 * g;
            f[base..base + 3].copy_from_slice(&[mean(&v), pct(&v, 50.0), mode(&v)]);
        }
    }

    let counters = [
        session.dns_nxdomain,
        session.dns_refused,
        session.dns_servfail,
        session.onion_accesses,
        session.unique_onion_domains,
        session.rejected_onion_queries,
        session.onion_domains_total,
        session.consensus_links,
        session.tor_keyword_urls,
    ];
    for (slot, c) in f[at(206)..].iter_mut().zip(counters) {
        *slot = c as f64;
    }
    f
}

/// Flows placed on the session timeline (each offset by its connection's
/// start relative to the earliest start) and merged in time order.
pub fn merged_flow(session: &HostSession) -> FlowTrace {
    let origin = min(&session.connections.iter().map(|c| c.start).collect::<Vec<_>>());
    let mut packets: Vec<PacketMeta> = session
        .flows
        .iter()
        .enumerate()
        .flat_map(|(i, flow)| {
            let offset = session.connections.get(i).map_or(0.0, |c| c.start - origin);
            flow.packets.iter().map(move |p| PacketMeta(p.0 + offset, p.1))
        })
        .collect();
    packets.sort_by(|a, b| a.0.total_cmp(&b.0));
    FlowTrace { packets }
}

/// The full 215-value vector. A session without packets gets a zero
/// connection-level half.
pub fn featurize(session: &HostSession) -> Result<Vec<f64>> {
    let has_packets = session.flows.iter().any(|f| !f.packets.is_empty());
    if !has_packets && session.connections.is_empty() {
        return Err(Error::invalid(format!(
            "session {} has neither flows nor connections",
            session.host_id
        )));
    }
    for (i, flow) in session.flows.iter().enumerate() {
        if flow.packets.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(Error::invalid(format!(
                "session {}: flow {i} is not time-ordered",
                session.host_id
            )));
        }
    }
    let mut v = if has_packets {
        connection_features(&merged_flow(session))?
    } else {
        vec![0.0; NUM_CONNECTION_FEATURES]
    };
    v.extend(host_features(session));
    debug_assert_eq!(v.len(), NUM_FEATURES);
    Ok(v)
}
