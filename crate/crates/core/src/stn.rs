//! Simple temporal networks for the route-level planner: consistency
//! checking, set-point windows and goal relaxation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack tolerated on cycle weights, in seconds.
pub const CYCLE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum StnError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("network is infeasible: {0:?}")]
    Infeasible(Vec<CycleEdge>),
    #[error("network is already feasible")]
    AlreadyFeasible,
    #[error("negative cycle has no upper bound to relax: {0:?}")]
    Unrelaxable(Vec<CycleEdge>),
}

pub(crate) mod serde_inf {
    //! Infinite bounds are written as JSON `null`.
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn infinite() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub from: String,
    pub to: String,
    #[serde(default)]
    pub lower: f64,
    #[serde(with = "serde_inf", default = "infinite")]
    pub upper: f64,
}

impl Constraint {
    pub fn new(from: &str, to: &str, lower: f64, upper: f64) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
            lower,
            upper,
        }
    }
}

/// Every event is implicitly constrained to happen no earlier than the
/// origin, which is `events[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StnRepr", into = "StnRepr")]
pub struct Stn {
    events: Vec<String>,
    constraints: Vec<Constraint>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct StnRepr {
    events: Vec<String>,
    #[serde(default)]
    constraints: Vec<Constraint>,
}

impl TryFrom<StnRepr> for Stn {
    type Error = StnError;
    fn try_from(r: StnRepr) -> Result<Self, StnError> {
        Stn::new(r.events, r.constraints)
    }
}

impl From<Stn> for StnRepr {
    fn from(s: Stn) -> Self {
        StnRepr {
            events: s.events,
            constraints: s.constraints,
        }
    }
}

impl Stn {
    pub fn new(events: Vec<String>, constraints: Vec<Constraint>) -> Result<Self, StnError> {
        if events.is_empty() {
            return Err(StnError::InvalidInput("an STN needs at least the origin event".into()));
        }
        let mut index = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            if index.insert(e.clone(), i).is_some() {
                return Err(StnError::InvalidInput(format!("duplicate event {e:?}")));
            }
        }
        for c in &constraints {
            for e in [&c.from, &c.to] {
                if !index.contains_key(e) {
                    return Err(StnError::InvalidInput(format!("constraint references unknown event {e:?}")));
                }
            }
            if !c.lower.is_finite() || c.upper.is_nan() || c.upper == f64::NEG_INFINITY {
                return Err(StnError::InvalidInput(format!("bad bounds [{}, {}] on {}->{}", c.lower, c.upper, c.from, c.to)));
            }
            if c.lower > c.upper {
                return Err(StnError::InvalidInput(format!(
                    "lower {} exceeds upper {} on {}->{}",
                    c.lower, c.upper, c.from, c.to
                )));
            }
        }
        Ok(Self {
            events,
            constraints,
            index,
        })
    }

    pub fn events(&self) -> &[String] {
        &self.events
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn event_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    fn with_upper(&self, i: usize, upper: f64) -> Stn {
        let mut s = self.clone();
        s.constraints[i].upper = upper;
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Upper,
    Lower,
}

/// One edge of a negative cycle in the distance graph. `constraint` is
/// `None` for the implicit "not before the origin" edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleEdge {
    pub constraint: Option<usize>,
    pub bound: Bound,
    pub from: String,
    pub to: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    u: usize,
    v: usize,
    w: f64,
    constraint: Option<usize>,
    bound: Bound,
}

fn distance_graph(stn: &Stn) -> Vec<Edge> {
    let mut edges = Vec::with_capacity(2 * stn.constraints.len() + stn.events.len());
    for (i, c) in stn.constraints.iter().enumerate() {
        let (u, v) = (stn.index[&c.from], stn.index[&c.to]);
        if c.upper.is_finite() {
            edges.push(Edge {
                u,
                v,
                w: c.upper,
                constraint: Some(i),
                bound: Bound::Upper,
            });
        }
        edges.push(Edge {
            u: v,
            v: u,
            w: -c.lower,
            constraint: Some(i),
            bound: Bound::Lower,
        });
    }
    for e in 1..stn.events.len() {
        edges.push(Edge {
            u: e,
            v: 0,
            w: 0.0,
            constraint: None,
            bound: Bound::Lower,
        });
    }
    edges
}

/// Bellman-Ford from a virtual source joined to every vertex. Returns a
/// negative cycle as edge indices in traversal order, if any.
fn find_negative_cycle(n: usize, edges: &[Edge]) -> Option<Vec<usize>> {
    let mut dist = vec![0.0; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut last = None;
    for _ in 0..=n {
        last = None;
        for (k, e) in edges.iter().enumerate() {
            if dist[e.u] + e.w < dist[e.v] - CYCLE_TOL {
                dist[e.v] = dist[e.u] + e.w;
                pred[e.v] = Some(k);
                last = Some(e.v);
            }
        }
        last?;
    }
    let mut x = last?;
    for _ in 0..n {
        x = edges[pred[x]?].u;
    }
    let mut cycle = Vec::new();
    let mut y = x;
    loop {
        let k = pred[y]?;
        cycle.push(k);
        y = edges[k].u;
        if y == x || cycle.len() > n {
            break;
        }
    }
    cycle.reverse();
    Some(cycle)
}

/// Single-source shortest paths on a graph known to have no negative cycle.
fn shortest_from(n: usize, edges: &[Edge], source: usize, reversed: bool, skip: Option<usize>) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; n];
    dist[source] = 0.0;
    for _ in 0..n {
        let mut changed = false;
        for (k, e) in edges.iter().enumerate() {
            if Some(k) == skip {
                continue;
            }
            let (a, b) = if reversed { (e.v, e.u) } else { (e.u, e.v) };
            if dist[a] + e.w < dist[b] {
                dist[b] = dist[a] + e.w;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    dist
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Earliest consistent time of each event, in event order.
    pub earliest: Vec<f64>,
    /// Latest consistent time of each event; infinite when unbounded.
    pub latest: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StnResult {
    Feasible(Schedule),
    Infeasible(Vec<CycleEdge>),
}

impl StnResult {
    pub fn is_feasible(&self) -> bool {
        matches!(self, StnResult::Feasible(_))
    }
}

pub fn stn_check(stn: &Stn) -> StnResult {
    let n = stn.events.len();
    let edges = distance_graph(stn);
    if let Some(cycle) = find_negative_cycle(n, &edges) {
        let witness = cycle
            .into_iter()
            .map(|k| {
                let e = edges[k];
                CycleEdge {
                    constraint: e.constraint,
                    bound: e.bound,
                    from: stn.events[e.u].clone(),
                    to: stn.events[e.v].clone(),
                    weight: e.w,
                }
            })
            .collect();
        return StnResult::Infeasible(witness);
    }
    let to_origin = shortest_from(n, &edges, 0, true, None);
    let latest = shortest_from(n, &edges, 0, false, None);
    StnResult::Feasible(Schedule {
        earliest: to_origin.iter().map(|d| if *d == 0.0 { 0.0 } else { -d }).collect(),
        latest,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteWaypoint {
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    /// STN event marking arrival at this waypoint.
    pub event: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetPoint {
    pub waypoint: (f64, f64),
    pub earliest: f64,
    #[serde(with = "serde_inf")]
    pub latest: f64,
    pub target_speed: f64,
}

pub fn make_set_points(route: &[RouteWaypoint], stn: &Stn) -> Result<Vec<SetPoint>, StnError> {
    let schedule = match stn_check(stn) {
        StnResult::Feasible(s) => s,
        StnResult::Infeasible(w) => return Err(StnError::Infeasible(w)),
    };
    route
        .iter()
        .map(|w| {
            let i = stn
                .event_index(&w.event)
                .ok_or_else(|| StnError::InvalidInput(format!("route event {:?} not in the STN", w.event)))?;
            if !(w.speed >= 0.0) {
                return Err(StnError::InvalidInput(format!("negative speed at {:?}", w.event)));
            }
            Ok(SetPoint {
                waypoint: (w.x, w.y),
                earliest: schedule.earliest[i],
                latest: schedule.latest[i],
                target_speed: w.speed,
            })
        })
        .collect()
}

/// Raises upper bounds until the network is consistent. Each round spreads
/// the deficit of one negative cycle evenly over its upper-bound edges; a
/// final pass lowers every raised bound back to the least consistent value.
pub fn relax_goals(stn: &Stn) -> Result<Stn, StnError> {
    if stn_check(stn).is_feasible() {
        return Err(StnError::AlreadyFeasible);
    }
    let original = stn.clone();
    let mut cur = stn.clone();
    let max_rounds = stn.constraints.len() + stn.events.len();
    let mut raised = Vec::new();
    for _ in 0..max_rounds {
        let witness = match stn_check(&cur) {
            StnResult::Feasible(_) => break,
            StnResult::Infeasible(w) => w,
        };
        let deficit = -witness.iter().map(|e| e.weight).sum::<f64>();
        let uppers: Vec<usize> = witness
            .iter()
            .filter(|e| e.bound == Bound::Upper)
            .filter_map(|e| e.constraint)
            .collect();
        if uppers.is_empty() {
            return Err(StnError::Unrelaxable(witness));
        }
        let share = deficit / uppers.len() as f64;
        for &i in &uppers {
            cur.constraints[i].upper += share;
            raised.push(i);
        }
    }
    if let StnResult::Infeasible(w) = stn_check(&cur) {
        return Err(StnError::Unrelaxable(w));
    }
    raised.sort_unstable();
    raised.dedup();
    for i in raised {
        let edges = distance_graph(&cur);
        let k = edges
            .iter()
            .position(|e| e.constraint == Some(i) && e.bound == Bound::Upper)
            .expect("relaxed constraint keeps a finite upper bound");
        let (u, v) = (edges[k].u, edges[k].v);
        let back = shortest_from(cur.events.len(), &edges, v, false, Some(k))[u];
        let least = original.constraints[i].upper.max(-back);
        if least < cur.constraints[i].upper {
            cur = cur.with_upper(i, least);
        }
    }
    Ok(cur)
}
