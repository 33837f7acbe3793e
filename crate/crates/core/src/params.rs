//! Named parameter storage partitioned into EPB / SPB / softmax groups.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::RunningStatUpdate;
use crate::error::{Error, Result};

/// Network component a parameter belongs to. The three groups partition θ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Group {
    Epb,
    Spb,
    Softmax,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Epb, Group::Spb, Group::Softmax];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Epb => "EPB",
            Group::Spb => "SPB",
            Group::Softmax => "SOFTMAX",
        }
    }

    fn bit(self) -> u8 {
        1 << self as u8
    }
}

/// Small set of [`Group`]s.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const fn empty() -> Self {
        GroupSet(0)
    }

    pub const fn all() -> Self {
        GroupSet(0b111)
    }

    pub fn of(groups: &[Group]) -> Self {
        let mut s = Self::empty();
        for &g in groups {
            s.insert(g);
        }
        s
    }

    pub fn insert(&mut self, g: Group) {
        self.0 |= g.bit();
    }

    pub fn contains(&self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Group> + '_ {
        Group::ALL.into_iter().filter(|g| self.contains(*g))
    }
}

impl Serialize for GroupSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for GroupSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let groups = Vec::<Group>::deserialize(d)?;
        Ok(GroupSet::of(&groups))
    }
}

/// Learnable weights versus batch-normalization running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Learnable,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: Group,
    pub kind: ParamKind,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn is_learnable(&self) -> bool {
        self.kind == ParamKind::Learnable
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All parameters of one network, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        group: Group,
        kind: ParamKind,
        value: Vec<f64>,
    ) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "parameter {name}: bad value length"
        );
        assert!(
            self.id_of(name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name: String::from(name),
            shape: shape.to_vec(),
            group,
            kind,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.is_learnable())
            .map(Param::numel)
            .sum()
    }

    /// ‖θ‖² over learnable parameters; running statistics are excluded.
    pub fn learnable_sq_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.is_learnable())
            .flat_map(|p| p.value.iter())
            .map(|v| v * v)
            .sum()
    }

    /// Groups that own at least one learnable parameter.
    pub fn groups_present(&self) -> GroupSet {
        let mut s = GroupSet::empty();
        for p in self.params.iter().filter(|p| p.is_learnable()) {
            s.insert(p.group);
        }
        s
    }

    /// Folds training-mode batch statistics into the running accumulators,
    /// skipping accumulators whose group is frozen.
    pub fn apply_running_stats(
        &mut self,
        updates: &[RunningStatUpdate],
        momentum: f64,
        frozen: GroupSet,
    ) {
        for u in updates {
            for (id, batch) in [(u.mean, &u.batch_mean), (u.var, &u.batch_var)] {
                let p = &mut self.params[id.0];
                if frozen.contains(p.group) {
                    continue;
                }
                for (r, b) in p.value.iter_mut().zip(batch) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
    }

    /// Checks that `other` has the same names, shapes, groups and kinds, in
    /// the same order; the error lists every offending parameter.
    pub fn check_compatible(&self, other: &ParameterStore) -> Result<()> {
        let mut bad = Vec::new();
        for p in &self.params {
            match other.by_name(&p.name) {
                None => bad.push(format!("{} (missing)", p.name)),
                Some(q) if q.shape != p.shape => {
                    bad.push(format!("{} (shape {:?} vs {:?})", p.name, q.shape, p.shape))
                }
                Some(q) if q.group != p.group || q.kind != p.kind => {
                    bad.push(format!("{} (group/kind)", p.name))
                }
                Some(_) => {}
            }
        }
        for q in &other.params {
            if self.by_name(&q.name).is_none() {
                bad.push(format!("{} (unexpected)", q.name));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompatibleParameters(bad))
        }
    }

    /// Copies all values from a compatible store.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        self.check_compatible(other)?;
        for p in &mut self.params {
            let q = other.by_name(&p.name).expect("checked");
            p.value.copy_from_slice(&q.value);
        }
        Ok(())
    }

    /// True when every value of every parameter is bitwise identical.
    pub fn bitwise_eq(&self, other: &ParameterStore) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && bits_eq(&a.value, &b.value))
    }

    /// True when all parameters of `group` are bitwise identical.
    pub fn group_bitwise_eq(&self, other: &ParameterStore, group: Group) -> bool {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, _)| a.group == group)
            .all(|(a, b)| a.name == b.name && bits_eq(&a.value, &b.value))
    }
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
