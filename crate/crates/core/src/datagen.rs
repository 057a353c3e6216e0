//! Synthetic transaction logs with planted fraud patterns.
//!
//! Background traffic comes from households of buyers who reuse their own
//! payment tokens, emails and addresses; some ship to shared forwarding
//! addresses, some check out as guests, and some regular buyers send a quick
//! burst of orders to several forwarders on their own account. Three fraud
//! patterns are planted:
//!
//! * stolen financial: a burst of guest or throwaway-account purchases on one
//!   victim's payment token, each shipped to a different forwarder, with the
//!   owner's legitimate purchases before and after;
//! * account takeover: an established buyer account that starts buying with a
//!   new email and address and shifted behavior features;
//! * opportunistic: one-off guest purchases to a forwarder with shifted risk
//!   features.

use crate::error::{invalid, Error, Result};
use crate::hetgraph::{entity_key, Label, NodeType, TransactionRecord};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_txn: usize,
    pub fraud_rate: f64,
    pub feature_dim: usize,
    /// Shared forwarding addresses.
    pub n_forwarders: usize,
    pub ring_count: usize,
    pub ring_size: usize,
    pub ato_count: usize,
    /// Fraud transactions per taken-over account.
    pub ato_size: usize,
    /// Mean shift of the risk block for opportunistic fraud.
    pub risk_shift: f64,
    /// Mean shift of the behavior block for account-takeover fraud.
    pub behavior_shift: f64,
    /// Fraction of `risk_shift` applied to stolen-financial ring members;
    /// the rest of their signal lives only in the graph.
    pub ring_feature_mix: f64,
    /// Standard deviation of every feature.
    pub noise_scale: f64,
    /// Draws every fraud feature vector from the background distribution.
    pub topology_only: bool,
    /// Encodes fraud signal as a variance change instead of a mean shift, so
    /// no linear score separates the classes.
    pub nonlinear: bool,
    pub guest_rate: f64,
    /// Share of legitimate traffic that is a family member checking out as a
    /// guest with a household card.
    pub decoy_rate: f64,
    /// Legitimate buyers who send one burst of `ring_size` orders to distinct
    /// forwarders with their own account, card and email.
    pub reship_count: usize,
    /// Share of households shipping to a forwarder.
    pub forwarder_rate: f64,
    pub mean_buyer_txns: f64,
    pub min_group_size: usize,
    pub span_seconds: i64,
    pub seed: u64,
}

impl GenConfig {
    /// Defaults scaled to `n_txn`: 4.3% fraud split roughly 70/20/10 between
    /// stolen-financial rings, account takeovers and opportunistic fraud.
    pub fn new(n_txn: usize, seed: u64) -> Self {
        let fraud_rate = 0.043;
        let n_fraud = (fraud_rate * n_txn as f64).round();
        let ring_size = 8;
        let ato_size = 5;
        Self {
            n_txn,
            fraud_rate,
            feature_dim: 16,
            n_forwarders: (n_txn / 160).max(2 * ring_size),
            ring_count: (0.7 * n_fraud / ring_size as f64).round() as usize,
            ring_size,
            ato_count: (0.2 * n_fraud / ato_size as f64).round() as usize,
            ato_size,
            risk_shift: 1.0,
            behavior_shift: 1.0,
            ring_feature_mix: 0.2,
            noise_scale: 1.0,
            topology_only: false,
            nonlinear: false,
            guest_rate: 0.05,
            decoy_rate: 0.03,
            reship_count: (0.7 * n_fraud / ring_size as f64).round() as usize,
            forwarder_rate: 0.15,
            mean_buyer_txns: 4.0,
            min_group_size: 5,
            span_seconds: 90 * DAY,
            seed,
        }
    }

    pub fn n_fraud(&self) -> usize {
        (self.fraud_rate * self.n_txn as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraud_rate > 0.0 && self.fraud_rate < 0.5) {
            return Err(invalid(format!("fraud_rate {} outside (0, 0.5)", self.fraud_rate)));
        }
        if self.ring_size < 3 {
            return Err(invalid(format!("ring_size {} below 3", self.ring_size)));
        }
        if self.ato_size < 2 {
            return Err(invalid(format!("ato_size {} below 2", self.ato_size)));
        }
        if self.feature_dim < 3 {
            return Err(invalid("feature_dim must be at least 3"));
        }
        if self.n_forwarders < self.ring_size {
            return Err(invalid(format!(
                "{} forwarders cannot give {} ring members distinct addresses",
                self.n_forwarders, self.ring_size
            )));
        }
        let planted = self.ring_count * self.ring_size + self.ato_count * self.ato_size;
        if planted > self.n_fraud() {
            return Err(invalid(format!("planted patterns need {planted} frauds but the rate gives {}", self.n_fraud())));
        }
        let legit = self.n_txn - self.n_fraud();
        if self.reship_count * self.ring_size * 4 > legit {
            return Err(invalid(format!("{} reshipping bursts crowd out background traffic", self.reship_count)));
        }
        for (name, p) in [("guest_rate", self.guest_rate), ("decoy_rate", self.decoy_rate), ("forwarder_rate", self.forwarder_rate)] {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid(format!("{name} {p} outside [0, 1)")));
            }
        }
        if self.mean_buyer_txns < 1.0 || self.span_seconds < 30 * DAY || self.noise_scale <= 0.0 {
            return Err(invalid("mean_buyer_txns, span_seconds or noise_scale out of range"));
        }
        Ok(())
    }

    /// Column ranges of the risk, behavior and noise feature blocks.
    pub fn blocks(&self) -> FeatureBlocks {
        let b = self.feature_dim * 3 / 8;
        FeatureBlocks { risk: 0..b, behavior: b..2 * b, noise: 2 * b..self.feature_dim }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureBlocks {
    pub risk: std::ops::Range<usize>,
    pub behavior: std::ops::Range<usize>,
    pub noise: std::ops::Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternTag {
    None,
    StolenFinancial,
    Ato,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingTruth {
    pub pmt_id: String,
    pub owner_buyer_id: String,
    pub fraud_txns: Vec<String>,
    pub pre_theft_txns: Vec<String>,
    pub post_reclaim_txns: Vec<String>,
    /// `(txn id, entity node name)` for every fraud member's payment edge.
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtoTruth {
    pub buyer_id: String,
    pub fraud_txns: Vec<String>,
    pub legit_txns: Vec<String>,
    /// Every edge of the fraud transactions.
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub v: u32,
    pub tags: BTreeMap<String, PatternTag>,
    pub rings: Vec<RingTruth>,
    pub ato: Vec<AtoTruth>,
}

impl GroundTruth {
    pub fn tag(&self, txn_id: &str) -> PatternTag {
        self.tags.get(txn_id).copied().unwrap_or(PatternTag::None)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let t: GroundTruth = serde_json::from_reader(r)?;
        if t.v != 1 {
            return Err(invalid(format!("unsupported ground-truth version {}", t.v)));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Legit,
    Guest,
    Decoy,
    Reship,
    OwnerPre(usize),
    OwnerPost(usize),
    Ring(usize),
    AtoLegit(usize),
    Ato(usize),
    Opportunistic,
}

impl Kind {
    fn label(self) -> Label {
        match self {
            Kind::Ring(_) | Kind::Ato(_) | Kind::Opportunistic => Label::Fraud,
            _ => Label::Legit,
        }
    }
}

#[derive(Debug, Clone)]
struct Draft {
    ts: i64,
    buyer: String,
    pmt: String,
    email: String,
    addr: String,
    kind: Kind,
}

struct Buyer {
    id: String,
    pmts: Vec<String>,
    email: String,
    addr: String,
    n_txn: usize,
}

#[derive(Default)]
struct Ids {
    counts: [usize; NodeType::COUNT],
}

impl Ids {
    fn fresh(&mut self, t: NodeType) -> String {
        let c = &mut self.counts[t.index()];
        *c += 1;
        let prefix = match t {
            NodeType::Txn => "T",
            NodeType::Pmt => "P",
            NodeType::Email => "E",
            NodeType::Addr => "A",
            NodeType::Buyer => "B",
        };
        format!("{prefix}{:06}", *c)
    }
}

/// Generates a log (sorted by time, ids assigned chronologically) and its
/// planted-pattern ground truth.
pub fn generate(cfg: &GenConfig) -> Result<(Vec<TransactionRecord>, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = Ids::default();
    let span = cfg.span_seconds;
    let n_fraud = cfg.n_fraud();
    let n_legit = cfg.n_txn - n_fraud;
    let n_decoy = (cfg.decoy_rate * n_legit as f64).round() as usize;
    let n_guest = (cfg.guest_rate * n_legit as f64).round() as usize;
    let n_reship = cfg.reship_count * cfg.ring_size;
    let n_regular = n_legit.saturating_sub(n_decoy + n_guest + n_reship);
    let forwarders: Vec<String> = (0..cfg.n_forwarders).map(|_| ids.fresh(NodeType::Addr)).collect();
    let extra = Poisson::new(cfg.mean_buyer_txns - 1.0 + 1e-9).map_err(|e| invalid(e.to_string()))?;

    let mut buyers: Vec<Buyer> = Vec::new();
    let mut remaining = n_regular;
    let mut rejected = 0;
    while remaining > 0 && rejected < 10_000 {
        let size = match rng.random::<f64>() {
            x if x < 0.5 => 1,
            x if x < 0.8 => 2,
            _ => 3,
        };
        let counts: Vec<usize> = (0..size).map(|_| 1 + extra.sample(&mut rng) as usize).collect();
        let total: usize = counts.iter().sum();
        let to_forwarder = rng.random_bool(cfg.forwarder_rate);
        if !to_forwarder && total < cfg.min_group_size {
            // Too small to survive group curation on its own.
            rejected += 1;
            continue;
        }
        if total > remaining {
            break;
        }
        let addr = if to_forwarder { forwarders[rng.random_range(0..forwarders.len())].clone() } else { ids.fresh(NodeType::Addr) };
        for k in counts {
            let mut pmts = vec![ids.fresh(NodeType::Pmt)];
            if k >= 3 && rng.random_bool(0.2) {
                pmts.push(ids.fresh(NodeType::Pmt));
            }
            buyers.push(Buyer { id: ids.fresh(NodeType::Buyer), pmts, email: ids.fresh(NodeType::Email), addr: addr.clone(), n_txn: k });
        }
        remaining -= total;
    }
    if buyers.is_empty() {
        let k = remaining.max(1);
        let pmts = vec![ids.fresh(NodeType::Pmt)];
        let addr = forwarders[0].clone();
        buyers.push(Buyer { id: ids.fresh(NodeType::Buyer), pmts, email: ids.fresh(NodeType::Email), addr, n_txn: k });
        remaining = remaining.saturating_sub(k);
    }
    while remaining > 0 {
        let b = rng.random_range(0..buyers.len());
        buyers[b].n_txn += 1;
        remaining -= 1;
    }

    // Ring owners need purchases on both sides of the theft.
    let mut order: Vec<usize> = (0..buyers.len()).collect();
    order.shuffle(&mut rng);
    let owners: Vec<usize> = order.iter().copied().filter(|&b| buyers[b].n_txn >= 2).take(cfg.ring_count).collect();
    if owners.len() < cfg.ring_count {
        return Err(invalid(format!("only {} buyers can own a ring; {} requested", owners.len(), cfg.ring_count)));
    }
    let victims: Vec<usize> = order.iter().copied().filter(|b| !owners.contains(b)).take(cfg.ato_count).collect();
    if victims.len() < cfg.ato_count {
        return Err(invalid(format!("only {} buyers available for account takeover", victims.len())));
    }
    let mut role: HashMap<usize, Kind> = HashMap::new();
    owners.iter().enumerate().for_each(|(r, &b)| {
        role.insert(b, Kind::OwnerPre(r));
    });
    victims.iter().enumerate().for_each(|(a, &b)| {
        role.insert(b, Kind::AtoLegit(a));
    });

    let mut drafts: Vec<Draft> = Vec::with_capacity(cfg.n_txn);
    let ring_start: Vec<i64> = (0..cfg.ring_count).map(|_| rng.random_range(span / 20..span * 9 / 10)).collect();
    let ato_start: Vec<i64> = (0..cfg.ato_count).map(|_| rng.random_range(span / 10..span * 19 / 20)).collect();
    for (bi, b) in buyers.iter().enumerate() {
        let k = b.n_txn;
        for j in 0..k {
            let pmt = if b.pmts.len() > 1 && rng.random_bool(0.3) { &b.pmts[1] } else { &b.pmts[0] };
            let (ts, kind, pmt) = match role.get(&bi) {
                Some(&Kind::OwnerPre(r)) => {
                    let t = ring_start[r];
                    if j < k / 2 {
                        (rng.random_range((t - 14 * DAY).max(0)..t), Kind::OwnerPre(r), &b.pmts[0])
                    } else {
                        let lo = t + DAY + 1;
                        (rng.random_range(lo..(t + 15 * DAY).min(span)), Kind::OwnerPost(r), &b.pmts[0])
                    }
                }
                Some(&Kind::AtoLegit(a)) => {
                    let t = ato_start[a];
                    (rng.random_range((t - 30 * DAY).max(0)..t), Kind::AtoLegit(a), pmt)
                }
                _ => (rng.random_range(0..span), Kind::Legit, pmt),
            };
            drafts.push(Draft { ts, buyer: b.id.clone(), pmt: pmt.clone(), email: b.email.clone(), addr: b.addr.clone(), kind });
        }
    }
    let bystanders: Vec<usize> = (0..buyers.len()).filter(|b| !role.contains_key(b)).collect();
    let households: Vec<usize> = if bystanders.is_empty() { (0..buyers.len()).collect() } else { bystanders };
    for _ in 0..cfg.reship_count {
        let b = &buyers[households[rng.random_range(0..households.len())]];
        let t = rng.random_range(0..span - DAY);
        for addr in forwarders.choose_multiple(&mut rng, cfg.ring_size) {
            drafts.push(Draft {
                ts: rng.random_range(t..=t + DAY),
                buyer: b.id.clone(),
                pmt: b.pmts[0].clone(),
                email: b.email.clone(),
                addr: addr.clone(),
                kind: Kind::Reship,
            });
        }
    }
    for _ in 0..n_decoy {
        let b = &buyers[households[rng.random_range(0..households.len())]];
        drafts.push(Draft {
            ts: rng.random_range(0..span),
            buyer: String::new(),
            pmt: b.pmts[0].clone(),
            email: ids.fresh(NodeType::Email),
            addr: b.addr.clone(),
            kind: Kind::Decoy,
        });
    }
    for _ in 0..n_guest {
        let addr = if rng.random_bool(0.6) {
            forwarders[rng.random_range(0..forwarders.len())].clone()
        } else {
            buyers[rng.random_range(0..buyers.len())].addr.clone()
        };
        drafts.push(Draft {
            ts: rng.random_range(0..span),
            buyer: String::new(),
            pmt: ids.fresh(NodeType::Pmt),
            email: ids.fresh(NodeType::Email),
            addr,
            kind: Kind::Guest,
        });
    }
    for (r, &owner) in owners.iter().enumerate() {
        let t = ring_start[r];
        let drops: Vec<&String> = forwarders.choose_multiple(&mut rng, cfg.ring_size).collect();
        for addr in drops {
            let buyer = if rng.random_bool(0.5) { String::new() } else { ids.fresh(NodeType::Buyer) };
            drafts.push(Draft {
                ts: rng.random_range(t..=t + DAY),
                buyer,
                pmt: buyers[owner].pmts[0].clone(),
                email: ids.fresh(NodeType::Email),
                addr: addr.clone(),
                kind: Kind::Ring(r),
            });
        }
    }
    for (a, &victim) in victims.iter().enumerate() {
        let t = ato_start[a];
        let email = ids.fresh(NodeType::Email);
        let addr = ids.fresh(NodeType::Addr);
        for _ in 0..cfg.ato_size {
            drafts.push(Draft {
                ts: rng.random_range(t..t + 2 * DAY),
                buyer: buyers[victim].id.clone(),
                pmt: buyers[victim].pmts[0].clone(),
                email: email.clone(),
                addr: addr.clone(),
                kind: Kind::Ato(a),
            });
        }
    }
    let n_opportunistic = n_fraud - cfg.ring_count * cfg.ring_size - cfg.ato_count * cfg.ato_size;
    for _ in 0..n_opportunistic {
        drafts.push(Draft {
            ts: rng.random_range(0..span),
            buyer: String::new(),
            pmt: ids.fresh(NodeType::Pmt),
            email: ids.fresh(NodeType::Email),
            addr: forwarders[rng.random_range(0..forwarders.len())].clone(),
            kind: Kind::Opportunistic,
        });
    }
    drafts.sort_by_key(|d| d.ts);

    let mut records = Vec::with_capacity(drafts.len());
    let mut rings: Vec<RingTruth> = owners
        .iter()
        .map(|&o| RingTruth {
            pmt_id: buyers[o].pmts[0].clone(),
            owner_buyer_id: buyers[o].id.clone(),
            fraud_txns: vec![],
            pre_theft_txns: vec![],
            post_reclaim_txns: vec![],
            edges: vec![],
        })
        .collect();
    let mut ato: Vec<AtoTruth> = victims
        .iter()
        .map(|&v| AtoTruth { buyer_id: buyers[v].id.clone(), fraud_txns: vec![], legit_txns: vec![], edges: vec![] })
        .collect();
    let mut tags = BTreeMap::new();
    for (i, d) in drafts.into_iter().enumerate() {
        let txn_id = format!("T{:07}", i + 1);
        let features = draw_features(cfg, d.kind, &mut rng);
        let tag = match d.kind {
            Kind::Ring(r) => {
                rings[r].fraud_txns.push(txn_id.clone());
                rings[r].edges.push((txn_id.clone(), entity_key(NodeType::Pmt, &d.pmt)));
                PatternTag::StolenFinancial
            }
            Kind::OwnerPre(r) => {
                rings[r].pre_theft_txns.push(txn_id.clone());
                PatternTag::None
            }
            Kind::OwnerPost(r) => {
                rings[r].post_reclaim_txns.push(txn_id.clone());
                PatternTag::StolenFinancial
            }
            Kind::Ato(a) => {
                for (t, id) in [(NodeType::Buyer, &d.buyer), (NodeType::Pmt, &d.pmt), (NodeType::Email, &d.email), (NodeType::Addr, &d.addr)] {
                    ato[a].edges.push((txn_id.clone(), entity_key(t, id)));
                }
                ato[a].fraud_txns.push(txn_id.clone());
                PatternTag::Ato
            }
            Kind::AtoLegit(a) => {
                ato[a].legit_txns.push(txn_id.clone());
                PatternTag::None
            }
            _ => PatternTag::None,
        };
        tags.insert(txn_id.clone(), tag);
        records.push(TransactionRecord {
            txn_id,
            timestamp: d.ts,
            buyer_id: d.buyer,
            pmt_id: d.pmt,
            email_id: d.email,
            addr_id: d.addr,
            label: d.kind.label(),
            features,
        });
    }
    let mut truth = GroundTruth { v: 1, tags, rings, ato };
    if cfg.min_group_size > 1 {
        let kept = curate_small_groups(&records, cfg.min_group_size);
        if kept.len() != records.len() {
            let keep: std::collections::HashSet<&str> = kept.iter().map(|r| r.txn_id.as_str()).collect();
            truth.tags.retain(|k, _| keep.contains(k.as_str()));
            records = kept;
        }
    }
    Ok((records, truth))
}

fn draw_features(cfg: &GenConfig, kind: Kind, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x: Vec<f64> = (0..cfg.feature_dim).map(|_| cfg.noise_scale * rng.sample::<f64, _>(StandardNormal)).collect();
    if cfg.topology_only {
        return x;
    }
    let blocks = cfg.blocks();
    let (range, shift) = match kind {
        Kind::Ring(_) => (blocks.risk, cfg.ring_feature_mix * cfg.risk_shift),
        Kind::Opportunistic => (blocks.risk, cfg.risk_shift),
        Kind::Ato(_) => (blocks.behavior, cfg.behavior_shift),
        _ => return x,
    };
    for v in &mut x[range] {
        if cfg.nonlinear {
            *v *= 1.0 + shift;
        } else {
            *v += shift * cfg.noise_scale;
        }
    }
    x
}

/// Keeps only records whose connected group (transactions linked through any
/// shared entity) has at least `min_group_size` transactions.
pub fn curate_small_groups(records: &[TransactionRecord], min_group_size: usize) -> Vec<TransactionRecord> {
    let n = records.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut first: HashMap<(NodeType, &str), usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        for t in NodeType::ENTITIES {
            let id = r.entity_id(t);
            if id.is_empty() {
                continue;
            }
            match first.get(&(t, id)) {
                Some(&j) => {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a] = b;
                    }
                }
                None => {
                    first.insert((t, id), i);
                }
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
    let mut size = vec![0usize; n];
    roots.iter().for_each(|&r| size[r] += 1);
    records.iter().zip(&roots).filter(|(_, &r)| size[r] >= min_group_size).map(|(rec, _)| rec.clone()).collect()
}

const FIXED_COLUMNS: [&str; 7] = ["txn_id", "timestamp", "buyer_id", "pmt_id", "email_id", "addr_id", "label"];

/// Writes the CSV log; floats use the shortest representation that parses
/// back to the same value.
pub fn write_log<W: Write>(records: &[TransactionRecord], w: W) -> Result<()> {
    let f = records.first().map_or(0, |r| r.features.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..f).map(|i| format!("f_{i}")));
    out.write_record(&header)?;
    for r in records {
        if r.features.len() != f {
            return Err(Error::FeatureWidth { expected: f, got: r.features.len() });
        }
        let mut row =
            vec![r.txn_id.clone(), r.timestamp.to_string(), r.buyer_id.clone(), r.pmt_id.clone(), r.email_id.clone(), r.addr_id.clone()];
        row.push(r.label.as_u8().to_string());
        row.extend(r.features.iter().map(|x| x.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log<R: Read>(r: R) -> Result<Vec<TransactionRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header = rdr.headers()?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < FIXED_COLUMNS.len() || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::Parse { line: 1, msg: format!("unexpected header {cols:?}") });
    }
    let f = cols.len() - FIXED_COLUMNS.len();
    for (i, c) in cols[FIXED_COLUMNS.len()..].iter().enumerate() {
        if *c != format!("f_{i}") {
            return Err(Error::Parse { line: 1, msg: format!("feature column {i} is named {c}") });
        }
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let err = |msg: String| Error::Parse { line, msg };
        if row.len() != cols.len() {
            return Err(err(format!("expected {} fields, found {}", cols.len(), row.len())));
        }
        let timestamp = row[1].parse::<i64>().map_err(|e| err(format!("timestamp {:?}: {e}", &row[1])))?;
        let label = match &row[6] {
            "0" => Label::Legit,
            "1" => Label::Fraud,
            other => return Err(err(format!("label must be 0 or 1, found {other:?}"))),
        };
        let features = (0..f)
            .map(|i| row[7 + i].parse::<f64>().map_err(|e| err(format!("f_{i} {:?}: {e}", &row[7 + i]))))
            .collect::<Result<Vec<_>>>()?;
        records.push(TransactionRecord {
            txn_id: row[0].to_string(),
            timestamp,
            buyer_id: row[2].to_string(),
            pmt_id: row[3].to_string(),
            email_id: row[4].to_string(),
            addr_id: row[5].to_string(),
            label,
            features,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = GenConfig::new(2000, 1);
        assert!(ok.validate().is_ok());
        assert!(GenConfig { fraud_rate: 0.6, ..ok.clone() }.validate().is_err());
        assert!(GenConfig { ring_size: 2, ..ok.clone() }.validate().is_err());
        assert!(GenConfig { n_forwarders: 3, ..ok.clone() }.validate().is_err());
        assert!(GenConfig { ring_count: 100, ..ok }.validate().is_err());
    }

    #[test]
    fn blocks_partition_the_features() {
        let b = GenConfig::new(10, 0).blocks();
        assert_eq!((b.risk, b.behavior, b.noise), (0..6, 6..12, 12..16));
    }

    #[test]
    fn exact_counts_and_chronological_ids() {
        let cfg = GenConfig::new(3000, 5);
        let (recs, truth) = generate(&cfg).unwrap();
        assert_eq!(recs.len(), 3000);
        assert_eq!(recs.iter().filter(|r| r.label.is_fraud()).count(), cfg.n_fraud());
        assert!(recs.windows(2).all(|w| w[0].timestamp <= w[1].timestamp && w[0].txn_id < w[1].txn_id));
        assert_eq!(truth.rings.len(), cfg.ring_count);
        for ring in &truth.rings {
            assert_eq!(ring.fraud_txns.len(), cfg.ring_size);
            assert!(!ring.pre_theft_txns.is_empty() && !ring.post_reclaim_txns.is_empty());
        }
    }

    #[test]
    fn curation_drops_small_groups() {
        let rec = |id: &str, pmt: &str| TransactionRecord {
            txn_id: id.into(),
            timestamp: 0,
            buyer_id: String::new(),
            pmt_id: pmt.into(),
            email_id: String::new(),
            addr_id: String::new(),
            label: Label::Legit,
            features: vec![],
        };
        let recs = vec![rec("a", "p"), rec("b", "p"), rec("c", "q")];
        let kept = curate_small_groups(&recs, 2);
        assert_eq!(kept.iter().map(|r| r.txn_id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn csv_schema_rules() {
        let empty: Vec<TransactionRecord> = vec![];
        let mut buf = Vec::new();
        write_log(&empty, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "txn_id,timestamp,buyer_id,pmt_id,email_id,addr_id,label\n");
        assert!(read_log(buf.as_slice()).unwrap().is_empty());
        let bad = "txn_id,timestamp,buyer_id,pmt_id,email_id,addr_id,label,f_0\nt1,5,b,p,e,a,2,0.5\n";
        match read_log(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let guest = "txn_id,timestamp,buyer_id,pmt_id,email_id,addr_id,label,f_0\nt1,5,,p,e,a,1,-0.25\n";
        let r = read_log(guest.as_bytes()).unwrap();
        assert_eq!(r[0].buyer_id, "");
        assert_eq!(r[0].features, vec![-0.25]);
    }
}
