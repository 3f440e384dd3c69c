//! Undirected road network with nearest-node snapping and Dijkstra distances.

use std::collections::HashMap;

use petgraph::algo::dijkstra;
use petgraph::graph::{NodeIndex, UnGraph};

use super::SpatialError;
use crate::geo::{haversine_m, LatLon};

/// Result of a network distance query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reach {
    Km(f64),
    Unreachable,
}

impl Reach {
    pub fn km(self) -> Option<f64> {
        match self {
            Reach::Km(d) => Some(d),
            Reach::Unreachable => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RoadNetwork {
    graph: UnGraph<LatLon, f64>,
    ids: Vec<String>,
    index: HashMap<String, NodeIndex>,
}

impl RoadNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: impl Into<String>, pos: LatLon) -> Result<(), SpatialError> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(SpatialError::DuplicateNode(id));
        }
        let ix = self.graph.add_node(pos);
        self.ids.push(id.clone());
        self.index.insert(id, ix);
        Ok(())
    }

    /// Adds an undirected edge; lengths are in metres and must be positive.
    pub fn add_edge(&mut self, a: &str, b: &str, length_m: f64) -> Result<(), SpatialError> {
        if !(length_m > 0.0 && length_m.is_finite()) {
            return Err(SpatialError::EdgeLength { a: a.into(), b: b.into(), length_m });
        }
        let ia = *self.index.get(a).ok_or_else(|| SpatialError::UnknownNode(a.into()))?;
        let ib = *self.index.get(b).ok_or_else(|| SpatialError::UnknownNode(b.into()))?;
        self.graph.add_edge(ia, ib, length_m);
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    pub fn edge_count(&self) -> usize {
        self.graph.edge_count()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.node_count() == 0
    }

    pub fn node_id(&self, ix: NodeIndex) -> &str {
        &self.ids[ix.index()]
    }

    pub fn position(&self, id: &str) -> Option<LatLon> {
        self.index.get(id).map(|&ix| self.graph[ix])
    }

    /// Nearest node by great-circle distance, with that distance in metres.
    /// Ties resolve to the earliest inserted node.
    pub fn nearest_node(&self, p: LatLon) -> Option<(NodeIndex, f64)> {
        self.graph
            .node_indices()
            .map(|ix| (ix, haversine_m(p, self.graph[ix])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn snap(&self, p: LatLon, snap_radius_m: f64) -> Result<Option<NodeIndex>, SpatialError> {
        let (ix, d) = self.nearest_node(p).ok_or(SpatialError::EmptyNetwork)?;
        Ok((d <= snap_radius_m).then_some(ix))
    }

    /// Shortest-path lengths (km) from the node nearest to `from` to every
    /// reachable node.
    pub fn distance_field(&self, from: LatLon, snap_radius_m: f64) -> Result<DistanceField<'_>, SpatialError> {
        let source = self.snap(from, snap_radius_m)?;
        let lengths = match source {
            Some(s) => dijkstra(&self.graph, s, None, |e| *e.weight()).into_iter().collect(),
            None => HashMap::new(),
        };
        Ok(DistanceField { net: self, lengths_m: lengths, snap_radius_m })
    }
}

/// Single-source distances, reused across many destinations.
#[derive(Debug, Clone)]
pub struct DistanceField<'a> {
    net: &'a RoadNetwork,
    lengths_m: HashMap<NodeIndex, f64>,
    snap_radius_m: f64,
}

impl DistanceField<'_> {
    pub fn to(&self, dest: LatLon) -> Reach {
        match self.net.snap(dest, self.snap_radius_m) {
            Ok(Some(ix)) => self.lengths_m.get(&ix).map_or(Reach::Unreachable, |m| Reach::Km(m / 1000.0)),
            _ => Reach::Unreachable,
        }
    }
}

pub const DEFAULT_SNAP_RADIUS_M: f64 = 1000.0;

/// Road-network distance in km between the nodes nearest to `from` and `to`.
pub fn network_distance(net: &RoadNetwork, from: LatLon, to: LatLon) -> Result<Reach, SpatialError> {
    network_distance_with_snap(net, from, to, DEFAULT_SNAP_RADIUS_M)
}

pub fn network_distance_with_snap(
    net: &RoadNetwork,
    from: LatLon,
    to: LatLon,
    snap_radius_m: f64,
) -> Result<Reach, SpatialError> {
    Ok(net.distance_field(from, snap_radius_m)?.to(to))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base() -> LatLon {
        LatLon::new(45.5, -73.6)
    }

    #[test]
    fn single_edge() {
        let mut net = RoadNetwork::new();
        let a = base();
        let b = a.offset_m(0.0, 4000.0);
        net.add_node("a", a).unwrap();
        net.add_node("b", b).unwrap();
        net.add_edge("a", "b", 5000.0).unwrap();
        assert_eq!(network_distance(&net, a, b).unwrap(), Reach::Km(5.0));
    }

    #[test]
    fn triangle_takes_two_legs() {
        let mut net = RoadNetwork::new();
        net.add_node("a", base()).unwrap();
        net.add_node("b", base().offset_m(0.0, 3000.0)).unwrap();
        net.add_node("c", base().offset_m(2000.0, 3000.0)).unwrap();
        net.add_edge("a", "b", 3000.0).unwrap();
        net.add_edge("b", "c", 4000.0).unwrap();
        net.add_edge("a", "c", 8000.0).unwrap();
        let d = network_distance(&net, net.position("a").unwrap(), net.position("c").unwrap()).unwrap();
        assert_eq!(d, Reach::Km(7.0));
    }

    #[test]
    fn disconnected_is_unreachable() {
        let mut net = RoadNetwork::new();
        net.add_node("a", base()).unwrap();
        net.add_node("b", base().offset_m(0.0, 500.0)).unwrap();
        assert_eq!(network_distance(&net, base(), base().offset_m(0.0, 500.0)).unwrap(), Reach::Unreachable);
    }

    #[test]
    fn far_from_network_is_unreachable() {
        let mut net = RoadNetwork::new();
        net.add_node("a", base()).unwrap();
        let far = base().offset_m(5000.0, 0.0);
        assert_eq!(network_distance(&net, far, base()).unwrap(), Reach::Unreachable);
        assert_eq!(network_distance(&net, base(), base()).unwrap(), Reach::Km(0.0));
    }

    #[test]
    fn empty_network_is_an_error() {
        assert!(matches!(network_distance(&RoadNetwork::new(), base(), base()), Err(SpatialError::EmptyNetwork)));
    }

    #[test]
    fn bad_edges_rejected() {
        let mut net = RoadNetwork::new();
        net.add_node("a", base()).unwrap();
        net.add_node("b", base()).unwrap();
        assert!(net.add_edge("a", "b", 0.0).is_err());
        assert!(net.add_edge("a", "zz", 10.0).is_err());
        assert!(net.add_node("a", base()).is_err());
    }

    proptest! {
        #[test]
        fn metric_properties(
            edges in proptest::collection::vec((0usize..8, 0usize..8, 1.0f64..5000.0), 1..25),
            (i, j, k) in (0usize..8, 0usize..8, 0usize..8),
        ) {
            let mut net = RoadNetwork::new();
            // nodes 3 km apart so snapping is unambiguous
            for n in 0..8 {
                net.add_node(format!("n{n}"), base().offset_m(3000.0 * n as f64, 0.0)).unwrap();
            }
            for &(a, b, len) in &edges {
                net.add_edge(&format!("n{a}"), &format!("n{b}"), len).unwrap();
            }
            let p = |n: usize| net.position(&format!("n{n}")).unwrap();
            let d = |a: usize, b: usize| network_distance(&net, p(a), p(b)).unwrap().km();
            match (d(i, j), d(j, i)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
            if let (Some(ij), Some(jk)) = (d(i, j), d(j, k)) {
                let ik = d(i, k).expect("connected through j");
                prop_assert!(ik <= ij + jk + 1e-9);
            }
        }
    }
}
