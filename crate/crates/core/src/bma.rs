//! Mixture models over ensemble members.
//!
//! The predictive density for a forecast case is a weighted sum of truncated
//! bivariate normal components, one per ensemble member, each centered at an
//! affine map of that member. Exchangeable members share their weight and
//! affine map through a [`GroupSpec`]; the parsimonious variant shares one
//! affine map across all members. All components share the scale matrix.

use crate::dists::TruncBivNormal;
use crate::linalg::{self, Mat2, Vec2};
use crate::verify::{self, PredictiveDist};
use crate::{Error, Result};
use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Named group of exchangeable ensemble members (0-based member indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub label: String,
    pub members: Vec<usize>,
}

/// Partition of the ensemble members into exchangeable groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Group>", into = "Vec<Group>")]
pub struct GroupSpec {
    groups: Vec<Group>,
    n_members: usize,
    /// member index -> group index
    member_group: Vec<usize>,
}

impl TryFrom<Vec<Group>> for GroupSpec {
    type Error = Error;
    fn try_from(groups: Vec<Group>) -> Result<Self> {
        GroupSpec::new(groups)
    }
}

impl From<GroupSpec> for Vec<Group> {
    fn from(spec: GroupSpec) -> Vec<Group> {
        spec.groups
    }
}

impl GroupSpec {
    /// Validate that the groups are nonempty and partition `0..M`.
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::InvalidConfig("no groups".into()));
        }
        let n_members: usize = groups.iter().map(|g| g.members.len()).sum();
        let mut member_group = vec![usize::MAX; n_members];
        for (k, g) in groups.iter().enumerate() {
            if g.members.is_empty() {
                return Err(Error::InvalidConfig(format!("group {} is empty", g.label)));
            }
            for &m in &g.members {
                if m >= n_members || member_group[m] != usize::MAX {
                    return Err(Error::InvalidConfig(format!(
                        "groups do not partition member indices (member {m})"
                    )));
                }
                member_group[m] = k;
            }
        }
        Ok(GroupSpec {
            groups,
            n_members,
            member_group,
        })
    }

    /// One singleton group per member, labelled `m1..mM`.
    pub fn singletons(n_members: usize) -> Self {
        let groups = (0..n_members)
            .map(|i| Group {
                label: format!("m{}", i + 1),
                members: vec![i],
            })
            .collect();
        GroupSpec::new(groups).expect("singleton groups always partition")
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_members(&self) -> usize {
        self.n_members
    }

    pub fn group_of(&self, member: usize) -> usize {
        self.member_group[member]
    }

    pub fn group_size(&self, k: usize) -> usize {
        self.groups[k].members.len()
    }
}

/// Supported ensemble grouping layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Eight non-exchangeable members, one group each.
    Uwme8,
    /// Control plus one group of ten exchangeable members.
    AhTwoGroup,
    /// Control plus odd- and even-numbered perturbed members (5 + 5).
    AhThreeGroup,
}

impl GroupKind {
    pub fn member_count(self) -> usize {
        match self {
            GroupKind::Uwme8 => 8,
            GroupKind::AhTwoGroup | GroupKind::AhThreeGroup => 11,
        }
    }
}

impl std::str::FromStr for GroupKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uwme8" => Ok(GroupKind::Uwme8),
            "ah_two_group" => Ok(GroupKind::AhTwoGroup),
            "ah_three_group" => Ok(GroupKind::AhThreeGroup),
            other => Err(Error::InvalidConfig(format!("unknown grouping {other:?}"))),
        }
    }
}

impl std::fmt::Display for GroupKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupKind::Uwme8 => "uwme8",
            GroupKind::AhTwoGroup => "ah_two_group",
            GroupKind::AhThreeGroup => "ah_three_group",
        })
    }
}

/// Group structure for one of the supported ensemble layouts.
///
/// Member 0 is the control for the two- and three-group layouts; perturbed
/// members follow in their original numbering.
pub fn make_group_model(kind: GroupKind) -> GroupSpec {
    let groups = match kind {
        GroupKind::Uwme8 => return GroupSpec::singletons(8),
        GroupKind::AhTwoGroup => vec![
            Group {
                label: "control".into(),
                members: vec![0],
            },
            Group {
                label: "perturbed".into(),
                members: (1..=10).collect(),
            },
        ],
        GroupKind::AhThreeGroup => vec![
            Group {
                label: "control".into(),
                members: vec![0],
            },
            Group {
                label: "odd".into(),
                members: vec![1, 3, 5, 7, 9],
            },
            Group {
                label: "even".into(),
                members: vec![2, 4, 6, 8, 10],
            },
        ],
    };
    GroupSpec::new(groups).expect("fixed layouts are valid")
}

/// Affine location map `f -> a + B f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap2 {
    pub a: Vec2,
    pub b: Mat2,
}

impl AffineMap2 {
    pub fn identity() -> Self {
        AffineMap2 {
            a: [0.0, 0.0],
            b: Mat2::identity(),
        }
    }

    pub fn apply(&self, f: Vec2) -> Vec2 {
        linalg::add(self.a, self.b.mul_vec(f))
    }
}

/// Location parameters: per group in full mode, shared in parsimonious mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LocationParams {
    PerGroup(Vec<AffineMap2>),
    Shared(AffineMap2),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BmaMode {
    Full,
    Parsimonious,
}

impl std::str::FromStr for BmaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(BmaMode::Full),
            "parsimonious" => Ok(BmaMode::Parsimonious),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// One forecast case's ensemble member vectors, indexed to match a GroupSpec.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastVector {
    members: Vec<Vec2>,
}

impl ForecastVector {
    pub fn new(members: Vec<Vec2>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyInput("forecast with no members".into()));
        }
        for (i, m) in members.iter().enumerate() {
            if !m.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidConfig(format!("member {i} is not finite")));
            }
            if m[0] < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "member {i} has negative wind {}",
                    m[0]
                )));
            }
        }
        Ok(ForecastVector { members })
    }

    pub fn members(&self) -> &[Vec2] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Mass-constraint tolerance accepted by the model constructor.
const WEIGHT_MASS_TOL: f64 = 1e-6;

/// A fitted mixture model.
#[derive(Debug, Clone, PartialEq)]
pub struct BmaModel {
    spec: GroupSpec,
    /// Per-group weight of each single member of that group.
    weights: Vec<f64>,
    params: LocationParams,
    sigma: Mat2,
}

impl BmaModel {
    pub fn new(
        spec: GroupSpec,
        weights: Vec<f64>,
        params: LocationParams,
        sigma: Mat2,
    ) -> Result<Self> {
        if weights.len() != spec.n_groups() {
            return Err(Error::InvalidConfig(format!(
                "{} weights for {} groups",
                weights.len(),
                spec.n_groups()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("weights must be nonnegative".into()));
        }
        let mass: f64 = weights
            .iter()
            .zip(spec.groups())
            .map(|(w, g)| w * g.members.len() as f64)
            .sum();
        if (mass - 1.0).abs() > WEIGHT_MASS_TOL {
            return Err(Error::InvalidConfig(format!(
                "mixture mass {mass} differs from 1"
            )));
        }
        if let LocationParams::PerGroup(maps) = &params {
            if maps.len() != spec.n_groups() {
                return Err(Error::InvalidConfig(format!(
                    "{} affine maps for {} groups",
                    maps.len(),
                    spec.n_groups()
                )));
            }
        }
        // Scale matrix validity is the same check the components make.
        TruncBivNormal::new([0.0, 0.0], sigma)?;
        Ok(BmaModel {
            spec,
            weights,
            params,
            sigma,
        })
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn params(&self) -> &LocationParams {
        &self.params
    }

    pub fn sigma(&self) -> Mat2 {
        self.sigma
    }

    pub fn mode(&self) -> BmaMode {
        match self.params {
            LocationParams::PerGroup(_) => BmaMode::Full,
            LocationParams::Shared(_) => BmaMode::Parsimonious,
        }
    }

    /// Affine map used by members of group `k`.
    pub fn affine(&self, k: usize) -> &AffineMap2 {
        match &self.params {
            LocationParams::PerGroup(maps) => &maps[k],
            LocationParams::Shared(map) => map,
        }
    }

    /// Mixture weight of a single member.
    pub fn member_weight(&self, member: usize) -> f64 {
        self.weights[self.spec.group_of(member)]
    }

    /// Component location for one member's forecast.
    pub fn component_location(&self, member: usize, f: Vec2) -> Vec2 {
        self.affine(self.spec.group_of(member)).apply(f)
    }

    /// Instantiate the predictive distribution for one forecast case.
    pub fn predictive(&self, f: &ForecastVector) -> Result<BmaPredictive> {
        if f.len() != self.spec.n_members() {
            return Err(Error::MemberMismatch {
                got: f.len(),
                expected: self.spec.n_members(),
            });
        }
        let mut components = Vec::with_capacity(f.len());
        let mut weights = Vec::with_capacity(f.len());
        for (m, fm) in f.members().iter().enumerate() {
            components.push(TruncBivNormal::new(
                self.component_location(m, *fm),
                self.sigma,
            )?);
            weights.push(self.member_weight(m));
        }
        Ok(BmaPredictive {
            components,
            weights,
        })
    }

    /// Mixture density at `x` for the case `f`.
    pub fn predictive_pdf(&self, f: &ForecastVector, x: Vec2) -> Result<f64> {
        Ok(self.predictive(f)?.pdf(x))
    }

    /// `n` draws from the predictive distribution.
    pub fn predictive_sample<R: Rng>(
        &self,
        f: &ForecastVector,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec2>> {
        Ok(self.predictive(f)?.sample(n, rng))
    }

    /// Exact predictive mean: the weight-averaged component truncated means.
    pub fn predictive_mean(&self, f: &ForecastVector) -> Result<Vec2> {
        Ok(self.predictive(f)?.mean())
    }

    /// Geometric median of an `n_sample` predictive draw.
    pub fn predictive_median<R: Rng>(
        &self,
        f: &ForecastVector,
        n_sample: usize,
        rng: &mut R,
    ) -> Result<Vec2> {
        if n_sample < 1000 {
            return Err(Error::InvalidConfig(format!(
                "median sample size {n_sample} below 1000"
            )));
        }
        let sample = self.predictive_sample(f, n_sample, rng)?;
        verify::geometric_median(&sample, verify::GEOMEDIAN_TOL)
    }
}

/// Predictive mixture for one forecast case, with per-member components.
pub struct BmaPredictive {
    components: Vec<TruncBivNormal>,
    weights: Vec<f64>,
}

impl BmaPredictive {
    pub fn pdf(&self, x: Vec2) -> f64 {
        self.components
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| w * c.pdf(x))
            .sum()
    }

    pub fn log_pdf(&self, x: Vec2) -> f64 {
        // log-sum-exp over component log densities.
        let mut terms = Vec::with_capacity(self.components.len());
        let mut max = f64::NEG_INFINITY;
        for (c, w) in self.components.iter().zip(&self.weights) {
            if *w > 0.0 {
                let t = w.ln() + c.log_pdf(x);
                if t > max {
                    max = t;
                }
                terms.push(t);
            }
        }
        if !max.is_finite() {
            return f64::NEG_INFINITY;
        }
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vec2> {
        let cum: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let idx = cum
                .partition_point(|c| *c <= u)
                .min(self.components.len() - 1);
            out.push(self.components[idx].sample(1, rng)[0]);
        }
        out
    }

    pub fn mean(&self) -> Vec2 {
        let mut acc = [0.0, 0.0];
        for (c, w) in self.components.iter().zip(&self.weights) {
            acc = linalg::add(acc, linalg::scale(c.moments().mean, *w));
        }
        acc
    }
}

impl PredictiveDist for BmaPredictive {
    fn sample_n(&self, n: usize, mut rng: &mut dyn rand::RngCore) -> Vec<Vec2> {
        self.sample(n, &mut rng)
    }

    fn exact_mean(&self) -> Option<Vec2> {
        Some(self.mean())
    }
}

/// Untagged shared-vs-per-group parameter encoding for model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SharedOrPerGroup<T> {
    Shared(T),
    PerGroup(Vec<T>),
}

/// On-disk form of a fitted model with its training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmaModelFile {
    pub mode: BmaMode,
    pub groups: Vec<Group>,
    pub weights: Vec<f64>,
    #[serde(rename = "A")]
    pub a: SharedOrPerGroup<Vec2>,
    #[serde(rename = "B")]
    pub b: SharedOrPerGroup<[[f64; 2]; 2]>,
    pub sigma: [[f64; 2]; 2],
    pub training_window: WindowMeta,
    pub ensemble: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub start_date: NaiveDate,
    pub end_date: NaiveDate,
}

impl BmaModelFile {
    pub fn from_model(model: &BmaModel, window: WindowMeta, ensemble: &str) -> Self {
        let (a, b) = match model.params() {
            LocationParams::Shared(map) => (
                SharedOrPerGroup::Shared(map.a),
                SharedOrPerGroup::Shared(map.b.0),
            ),
            LocationParams::PerGroup(maps) => (
                SharedOrPerGroup::PerGroup(maps.iter().map(|m| m.a).collect()),
                SharedOrPerGroup::PerGroup(maps.iter().map(|m| m.b.0).collect()),
            ),
        };
        BmaModelFile {
            mode: model.mode(),
            groups: model.spec().groups().to_vec(),
            weights: model.weights().to_vec(),
            a,
            b,
            sigma: model.sigma().0,
            training_window: window,
            ensemble: ensemble.to_string(),
        }
    }

    pub fn to_model(&self) -> Result<BmaModel> {
        let spec = GroupSpec::new(self.groups.clone())?;
        let params = match (&self.a, &self.b, self.mode) {
            (SharedOrPerGroup::Shared(a), SharedOrPerGroup::Shared(b), BmaMode::Parsimonious) => {
                LocationParams::Shared(AffineMap2 { a: *a, b: Mat2(*b) })
            }
            (SharedOrPerGroup::PerGroup(a), SharedOrPerGroup::PerGroup(b), BmaMode::Full) => {
                if a.len() != b.len() {
                    return Err(Error::InvalidConfig("A/B length mismatch".into()));
                }
                LocationParams::PerGroup(
                    a.iter()
                        .zip(b)
                        .map(|(a, b)| AffineMap2 { a: *a, b: Mat2(*b) })
                        .collect(),
                )
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "parameter shape does not match mode".into(),
                ))
            }
        };
        BmaModel::new(spec, self.weights.clone(), params, Mat2(self.sigma))
    }
}
