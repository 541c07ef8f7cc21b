//! Message memory: the key-map that links each sequence to the later
//! sequences whose initial steps it covers, and the state-map holding the
//! per-sequence statistics `(mu0, hbar0, c)` used to assemble initial
//! hidden states.
//!
//! An entry starts *unseeded*: its `mu0` is the zero vector and carries no
//! information yet. Reads of an unseeded entry return that zero vector, and
//! the first propagation installs the epoch mean as `mu0` outright. From
//! then on the read, write and propagate rules apply verbatim.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sequence identity: entity plus initial step. Orders by `(entity, T)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SequenceId {
    pub entity: Arc<str>,
    pub initial_step: usize,
}

impl SequenceId {
    pub fn new(entity: impl Into<Arc<str>>, initial_step: usize) -> Self {
        Self {
            entity: entity.into(),
            initial_step,
        }
    }
}

impl fmt::Display for SequenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.entity, self.initial_step)
    }
}

/// Downstream sequences of each id, sorted by initial step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyMap {
    window: usize,
    links: BTreeMap<SequenceId, Vec<SequenceId>>,
}

impl KeyMap {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn get(&self, id: &SequenceId) -> Option<&[SequenceId]> {
        self.links.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SequenceId, &[SequenceId])> {
        self.links.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// Number of keys listing `id`, i.e. how many sequences write to it
    /// each epoch.
    pub fn in_degree(&self) -> BTreeMap<SequenceId, usize> {
        let mut deg: BTreeMap<SequenceId, usize> = self.links.keys().map(|k| (k.clone(), 0)).collect();
        for targets in self.links.values() {
            for t in targets {
                *deg.entry(t.clone()).or_default() += 1;
            }
        }
        deg
    }
}

/// Links every id `i` to the ids `j` of the same entity with
/// `T_i < T_j <= T_i + W`.
pub fn build_key_map(ids: &[SequenceId], window: usize) -> Result<KeyMap> {
    let mut sorted: Vec<&SequenceId> = ids.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Memory(format!("duplicate sequence id {}", w[0])));
    }
    let mut links = BTreeMap::new();
    for (pos, id) in sorted.iter().enumerate() {
        let reach = id.initial_step + window;
        let targets: Vec<SequenceId> = sorted[pos + 1..]
            .iter()
            .take_while(|j| j.entity == id.entity && j.initial_step <= reach)
            .map(|j| (*j).clone())
            .collect();
        links.insert((*id).clone(), targets);
    }
    Ok(KeyMap { window, links })
}

/// The message keeper: whether prior-epoch messages survive into new ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct MessageKeeper(u8);

impl MessageKeeper {
    pub const DISCARD: MessageKeeper = MessageKeeper(0);
    pub const KEEP: MessageKeeper = MessageKeeper(1);

    pub fn new(delta: u8) -> Result<Self> {
        match delta {
            0 | 1 => Ok(Self(delta)),
            _ => Err(Error::Config(format!("message keeper must be 0 or 1, got {delta}"))),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    fn weight(self) -> f64 {
        f64::from(self.0)
    }
}

impl TryFrom<u8> for MessageKeeper {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MessageKeeper> for u8 {
    fn from(k: MessageKeeper) -> u8 {
        k.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateEntry {
    pub mu0: Vec<f64>,
    pub hbar0: Vec<f64>,
    pub count: u32,
    /// Whether `mu0` holds a propagated message (false until the first
    /// propagation touches this entry).
    pub seeded: bool,
}

impl StateEntry {
    /// `(0, 0, 0)`, unseeded.
    pub fn new(hidden: usize) -> Self {
        Self {
            mu0: vec![0.0; hidden],
            hbar0: vec![0.0; hidden],
            count: 0,
            seeded: false,
        }
    }

    /// An entry whose `mu0` already carries a message.
    pub fn with_message(mu0: Vec<f64>) -> Self {
        let h = mu0.len();
        Self {
            mu0,
            hbar0: vec![0.0; h],
            count: 0,
            seeded: true,
        }
    }

    pub fn hidden(&self) -> usize {
        self.mu0.len()
    }
}

/// Assembles the initial hidden state for a sequence:
/// `mu0` when `delta = 0, c = 0`, otherwise `(delta mu0 + c hbar0) / (delta + c)`.
pub fn read_message(entry: &StateEntry, keeper: MessageKeeper) -> Vec<f64> {
    if !entry.seeded {
        return vec![0.0; entry.hidden()];
    }
    let c = f64::from(entry.count);
    let delta = keeper.weight();
    if entry.count == 0 && keeper == MessageKeeper::DISCARD {
        return entry.mu0.clone();
    }
    entry
        .mu0
        .iter()
        .zip(&entry.hbar0)
        .map(|(m, h)| (delta * m + c * h) / (delta + c))
        .collect()
}

/// Folds one detached hidden state into the running epoch mean.
pub fn write_state(entry: &mut StateEntry, h0: &[f64]) -> Result<()> {
    if h0.len() != entry.hidden() {
        return Err(Error::Shape(format!(
            "state of {} units written to an entry of {}",
            h0.len(),
            entry.hidden()
        )));
    }
    if h0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "written hidden state", step: 0 });
    }
    let c = f64::from(entry.count);
    for (m, &h) in entry.hbar0.iter_mut().zip(h0) {
        *m = (c * *m + h) / (c + 1.0);
    }
    entry.count += 1;
    Ok(())
}

/// End-of-epoch update of one entry; entries without writes are untouched.
pub fn propagate_entry(entry: &mut StateEntry, keeper: MessageKeeper) {
    if entry.count == 0 {
        return;
    }
    if entry.seeded {
        let c = f64::from(entry.count);
        let delta = keeper.weight();
        for (m, h) in entry.mu0.iter_mut().zip(&entry.hbar0) {
            *m = (delta * *m + c * h) / (delta + c);
        }
    } else {
        entry.mu0.copy_from_slice(&entry.hbar0);
        entry.seeded = true;
    }
    entry.hbar0.iter_mut().for_each(|v| *v = 0.0);
    entry.count = 0;
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateMap {
    keeper: MessageKeeper,
    hidden: usize,
    entries: BTreeMap<SequenceId, StateEntry>,
}

/// One `(mu0, hbar0, c)` record per id, all starting at zero.
pub fn init_state_map(ids: &[SequenceId], hidden: usize, keeper: MessageKeeper) -> Result<StateMap> {
    if hidden == 0 {
        return Err(Error::Config("state-map needs a positive hidden size".into()));
    }
    Ok(StateMap {
        keeper,
        hidden,
        entries: ids.iter().map(|id| (id.clone(), StateEntry::new(hidden))).collect(),
    })
}

impl StateMap {
    pub fn keeper(&self) -> MessageKeeper {
        self.keeper
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &SequenceId) -> Option<&StateEntry> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SequenceId, &StateEntry)> {
        self.entries.iter()
    }

    fn entry_mut(&mut self, id: &SequenceId) -> Result<&mut StateEntry> {
        self.entries
            .get_mut(id)
            .ok_or_else(|| Error::Memory(format!("no state-map entry for {id}")))
    }

    pub fn read(&self, id: &SequenceId) -> Result<Vec<f64>> {
        let e = self
            .entries
            .get(id)
            .ok_or_else(|| Error::Memory(format!("no state-map entry for {id}")))?;
        Ok(read_message(e, self.keeper))
    }

    pub fn write(&mut self, id: &SequenceId, h0: &[f64]) -> Result<()> {
        write_state(self.entry_mut(id)?, h0)
    }

    /// Runs the propagate rule over every entry.
    pub fn propagate_epoch(&mut self) {
        let keeper = self.keeper;
        for e in self.entries.values_mut() {
            propagate_entry(e, keeper);
        }
    }

    /// Appends `epoch,entity,T,c,norm_mu0,norm_hbar0` rows.
    pub fn dump_csv<W: Write>(&self, epoch: usize, out: &mut W) -> std::io::Result<()> {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (id, e) in &self.entries {
            writeln!(
                out,
                "{epoch},{},{},{},{},{}",
                id.entity,
                id.initial_step,
                e.count,
                norm(&e.mu0),
                norm(&e.hbar0)
            )?;
        }
        Ok(())
    }
}

pub const STATE_MAP_CSV_HEADER: &str = "epoch,entity,T,c,norm_mu0,norm_hbar0";

/// The message in force at the start of epoch `epochs` after the per-epoch
/// means `hbars[e - 1]` (`e = 1 .. epochs - 1`) were propagated with a
/// constant write count `count`.
///
/// `E = 1` gives the zero vector, `E = 2` the first epoch mean, and for
/// `E > 2`:
///
/// ```text
/// δ^(E-2) h̄<1> / (δ+c)^(E-2) + Σ_{e=3..E} δ^(E-e) c h̄<e-1> / (δ+c)^(E-e+1)
/// ```
///
/// with `0^0 = 1`, so `δ = 0` keeps only the most recent mean.
pub fn closed_form_mu0(hbars: &[Vec<f64>], count: u32, keeper: MessageKeeper, epochs: usize) -> Result<Vec<f64>> {
    if epochs == 0 {
        return Err(Error::Config("epoch index starts at 1".into()));
    }
    if count == 0 {
        return Err(Error::Config("closed form assumes at least one write per epoch".into()));
    }
    if hbars.len() < epochs - 1 {
        return Err(Error::Config(format!(
            "epoch {epochs} needs {} epoch means, {} given",
            epochs - 1,
            hbars.len()
        )));
    }
    let hidden = hbars.first().map_or(0, Vec::len);
    if epochs == 1 {
        return Ok(vec![0.0; hidden]);
    }
    if epochs == 2 {
        return Ok(hbars[0].clone());
    }
    let delta = keeper.weight();
    let c = f64::from(count);
    let pow = |base: f64, exp: usize| if exp == 0 { 1.0 } else { base.powi(exp as i32) };

    let mut mu: Vec<f64> = hbars[0]
        .iter()
        .map(|h| pow(delta, epochs - 2) * h / pow(delta + c, epochs - 2))
        .collect();
    for e in 3..=epochs {
        let w = pow(delta, epochs - e) * c / pow(delta + c, epochs - e + 1);
        for (m, h) in mu.iter_mut().zip(&hbars[e - 2]) {
            *m += w * h;
        }
    }
    Ok(mu)
}
