//! Rating ingestion, user roles and cold-start splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeededRng, Stream};

pub const MIN_RATING: f64 = 0.0;
pub const MAX_RATING: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Auxiliary,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Auxiliary => "auxiliary",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    pub domain: Domain,
}

/// All ratings observed in one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub users: BTreeSet<String>,
    pub items: BTreeSet<String>,
    pub records: Vec<RatingRecord>,
}

impl DomainDataset {
    /// Builds a dataset, validating ratings and keeping the first record of
    /// each duplicated (user, item) pair.
    pub fn new(domain: Domain, records: Vec<RatingRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(records.len());
        for r in records {
            if r.domain != domain {
                return Err(Error::validation(format!(
                    "record ({}, {}) belongs to the {} domain, expected {}",
                    r.user_id, r.item_id, r.domain, domain
                )));
            }
            check_rating(r.rating)
                .map_err(|m| Error::validation(format!("user {} item {}: {m}", r.user_id, r.item_id)))?;
            if seen.insert((r.user_id.clone(), r.item_id.clone())) {
                kept.push(r);
            }
        }
        let users = kept.iter().map(|r| r.user_id.clone()).collect();
        let items = kept.iter().map(|r| r.item_id.clone()).collect();
        Ok(Self {
            domain,
            users,
            items,
            records: kept,
        })
    }

    /// Drops users with fewer than `min` records (and items left unrated).
    pub fn filter_min_interactions(self, min: usize) -> Result<Self> {
        let counts: BTreeMap<String, usize> = self
            .interaction_counts()
            .into_iter()
            .map(|(u, c)| (u.to_string(), c))
            .collect();
        let records = self.records.into_iter().filter(|r| counts[&r.user_id] >= min).collect();
        Self::new(self.domain, records)
    }

    pub fn interaction_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.user_id.as_str()).or_insert(0) += 1;
        }
        counts
    }

    pub fn records_by_user(&self) -> BTreeMap<&str, Vec<&RatingRecord>> {
        let mut by_user: BTreeMap<&str, Vec<&RatingRecord>> = BTreeMap::new();
        for r in &self.records {
            by_user.entry(r.user_id.as_str()).or_default().push(r);
        }
        by_user
    }

    pub fn write_tsv<W: Write>(&self, mut w: W, header: &[String]) -> std::io::Result<()> {
        for line in header {
            writeln!(w, "# {line}")?;
        }
        for r in &self.records {
            writeln!(w, "{}\t{}\t{}", r.user_id, r.item_id, r.rating)?;
        }
        Ok(())
    }
}

fn check_rating(rating: f64) -> std::result::Result<(), String> {
    if !(MIN_RATING..=MAX_RATING).contains(&rating) {
        return Err(format!("rating {rating} outside [{MIN_RATING}, {MAX_RATING}]"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    /// Drop users with fewer records than this. Off by default.
    pub min_interactions: Option<usize>,
}

/// Reads a tab-separated `user \t item \t rating` file.
pub fn ingest_ratings(path: &Path, domain: Domain, opts: IngestOptions) -> Result<DomainDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(BufReader::new(file), domain, opts)
}

pub fn parse_ratings<R: BufRead>(reader: R, domain: Domain, opts: IngestOptions) -> Result<DomainDataset> {
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let (user, item) = (fields[0].trim(), fields[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty user or item id".into(),
            });
        }
        let rating: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("invalid rating `{}`", fields[2].trim()),
        })?;
        check_rating(rating).map_err(|m| Error::validation(format!("line {lineno}: {m}")))?;
        records.push(RatingRecord {
            user_id: user.to_string(),
            item_id: item.to_string(),
            rating,
            domain,
        });
    }
    let ds = DomainDataset::new(domain, records)?;
    match opts.min_interactions {
        Some(min) => ds.filter_min_interactions(min),
        None => Ok(ds),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Overlapping,
    SideTarget,
    SideAuxiliary,
    ColdStart,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Overlapping => "overlapping",
            Role::SideTarget => "side_target",
            Role::SideAuxiliary => "side_auxiliary",
            Role::ColdStart => "cold_start",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoleAssignment {
    pub roles: BTreeMap<String, Role>,
}

impl RoleAssignment {
    pub fn users_with(&self, role: Role) -> BTreeSet<String> {
        self.roles
            .iter()
            .filter(|(_, r)| **r == role)
            .map(|(u, _)| u.clone())
            .collect()
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.values().filter(|r| **r == role).count()
    }

    /// Re-tags the split's test users as cold-start.
    pub fn with_split(&self, split: &ColdStartSplit) -> RoleAssignment {
        let mut roles = self.roles.clone();
        for u in &split.test_cold {
            roles.insert(u.clone(), Role::ColdStart);
        }
        RoleAssignment { roles }
    }
}

pub fn assign_roles(aux: &DomainDataset, tgt: &DomainDataset) -> RoleAssignment {
    let mut roles = BTreeMap::new();
    for u in aux.users.union(&tgt.users) {
        let role = match (aux.users.contains(u), tgt.users.contains(u)) {
            (true, true) => Role::Overlapping,
            (false, true) => Role::SideTarget,
            _ => Role::SideAuxiliary,
        };
        roles.insert(u.clone(), role);
    }
    RoleAssignment { roles }
}

/// Fraction of overlapping users held out as cold-start test users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    beta: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(beta: f64, seed: u64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::validation(format!("beta {beta} must lie in (0, 1)")));
        }
        Ok(Self { beta, seed })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Number of test users for `n` overlapping users, rounding half up.
    pub fn test_count(&self, n: usize) -> usize {
        (self.beta * n as f64 + 0.5).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColdStartSplit {
    pub train_overlap: BTreeSet<String>,
    pub test_cold: BTreeSet<String>,
}

/// Shuffles the sorted overlapping users with the split stream and holds out
/// the first `round(beta * n)` of them.
pub fn split_cold_start(roles: &RoleAssignment, spec: &SplitSpec) -> Result<ColdStartSplit> {
    let mut overlapping: Vec<String> = roles.users_with(Role::Overlapping).into_iter().collect();
    let n = overlapping.len();
    if n < 2 {
        return Err(Error::DegenerateSplit(format!(
            "need at least 2 overlapping users, found {n}"
        )));
    }
    let k = spec.test_count(n);
    if k == 0 || k >= n {
        return Err(Error::DegenerateSplit(format!(
            "beta {} over {n} overlapping users gives {k} test users",
            spec.beta
        )));
    }
    let mut rng = SeededRng::new(spec.seed, Stream::Split);
    rng.shuffle(&mut overlapping);
    let test_cold = overlapping[..k].iter().cloned().collect();
    let train_overlap = overlapping[k..].iter().cloned().collect();
    Ok(ColdStartSplit {
        train_overlap,
        test_cold,
    })
}

/// Test records whose item never appears in training.
pub fn dual_cold_start_subset(test_records: &[RatingRecord], train_items: &BTreeSet<String>) -> Vec<RatingRecord> {
    test_records
        .iter()
        .filter(|r| !train_items.contains(&r.item_id))
        .cloned()
        .collect()
}
