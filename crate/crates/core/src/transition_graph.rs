//! Turn-level state transition graph with relation-enhanced attention and
//! the two-step transit-then-interact update.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{Speaker, TransitionWindow};
use crate::error::{Error, Result};
use crate::numerics::nn::MASK_FILL;
use crate::numerics::{Ctx, GatedFusion, Init, MultiHeadAttention, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Semantics,
    Strategy,
    Emotion,
}

impl StateKind {
    pub const ALL: [StateKind; 3] = [StateKind::Semantics, StateKind::Strategy, StateKind::Emotion];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short(self) -> &'static str {
        match self {
            StateKind::Semantics => "sem",
            StateKind::Strategy => "strat",
            StateKind::Emotion => "emo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeGroup {
    Transition,
    Interaction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeType {
    SemToSem,
    StratToStrat,
    EmoToEmo,
    SemToStrat,
    EmoToStrat,
    SemToEmo,
    StratToEmo,
}

impl EdgeType {
    pub const COUNT: usize = 7;
    pub const ALL: [EdgeType; 7] = [
        EdgeType::SemToSem,
        EdgeType::StratToStrat,
        EdgeType::EmoToEmo,
        EdgeType::SemToStrat,
        EdgeType::EmoToStrat,
        EdgeType::SemToEmo,
        EdgeType::StratToEmo,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<EdgeType> {
        EdgeType::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown edge type {i}")))
    }

    pub fn group(self) -> EdgeGroup {
        if self.source() == self.target() {
            EdgeGroup::Transition
        } else {
            EdgeGroup::Interaction
        }
    }

    pub fn source(self) -> StateKind {
        use EdgeType::*;
        match self {
            SemToSem | SemToStrat | SemToEmo => StateKind::Semantics,
            StratToStrat | StratToEmo => StateKind::Strategy,
            EmoToEmo | EmoToStrat => StateKind::Emotion,
        }
    }

    pub fn target(self) -> StateKind {
        use EdgeType::*;
        match self {
            SemToSem => StateKind::Semantics,
            StratToStrat | SemToStrat | EmoToStrat => StateKind::Strategy,
            EmoToEmo | SemToEmo | StratToEmo => StateKind::Emotion,
        }
    }

    pub fn name(self) -> &'static str {
        use EdgeType::*;
        match self {
            SemToSem => "sem_to_sem",
            StratToStrat => "strat_to_strat",
            EmoToEmo => "emo_to_emo",
            SemToStrat => "sem_to_strat",
            EmoToStrat => "emo_to_strat",
            SemToEmo => "sem_to_emo",
            StratToEmo => "strat_to_emo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphNode {
    pub turn: usize,
    pub speaker: Speaker,
    pub placeholder: bool,
}

impl GraphNode {
    pub fn has(&self, kind: StateKind) -> bool {
        match kind {
            StateKind::Semantics => true,
            StateKind::Strategy => self.speaker == Speaker::Supporter,
            StateKind::Emotion => self.speaker == Speaker::Seeker,
        }
    }
}

/// Directed edge between node indices, `src < dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeType,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransitionGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
}

impl TransitionGraph {
    /// Connects every node to all earlier ones by each applicable edge type.
    pub fn build(window: &TransitionWindow) -> Result<Self> {
        if window.node_turns.is_empty() {
            return Err(Error::contract("transition window has no nodes"));
        }
        let last = window.node_turns.len() - 1;
        let nodes = window
            .node_turns
            .iter()
            .enumerate()
            .map(|(i, &(turn, speaker))| GraphNode {
                turn,
                speaker,
                placeholder: i == last,
            })
            .collect();
        Ok(Self::connect(nodes))
    }

    /// Graph over `speakers` followed by a supporter response placeholder.
    pub fn from_speakers(speakers: &[Speaker]) -> Self {
        let mut nodes: Vec<GraphNode> = speakers
            .iter()
            .enumerate()
            .map(|(turn, &speaker)| GraphNode { turn, speaker, placeholder: false })
            .collect();
        nodes.push(GraphNode {
            turn: speakers.len(),
            speaker: Speaker::Supporter,
            placeholder: true,
        });
        Self::connect(nodes)
    }

    fn connect(nodes: Vec<GraphNode>) -> Self {
        let mut edges = Vec::new();
        for dst in 0..nodes.len() {
            for src in 0..dst {
                for kind in EdgeType::ALL {
                    if nodes[src].has(kind.source()) && nodes[dst].has(kind.target()) {
                        edges.push(Edge { src, dst, kind });
                    }
                }
            }
        }
        TransitionGraph { nodes, edges }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node indices carrying a state of `kind`, in turn order.
    pub fn nodes_with(&self, kind: StateKind) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].has(kind)).collect()
    }

    /// Row of node `node` inside the `kind` state bank.
    pub fn row_of(&self, kind: StateKind, node: usize) -> Option<usize> {
        if !self.nodes.get(node)?.has(kind) {
            return None;
        }
        Some((0..node).filter(|&i| self.nodes[i].has(kind)).count())
    }

    pub fn without_group(&self, group: EdgeGroup) -> Self {
        TransitionGraph {
            nodes: self.nodes.clone(),
            edges: self.edges.iter().copied().filter(|e| e.kind.group() != group).collect(),
        }
    }

    /// Adjacency dump for fixtures and debugging.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "nodes": self.nodes.iter().enumerate().map(|(i, n)| json!({
                "index": i,
                "turn": n.turn,
                "speaker": n.speaker,
                "placeholder": n.placeholder,
                "states": StateKind::ALL.iter().filter(|k| n.has(**k)).map(|k| k.short()).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
            "edges": self.edges.iter().map(|e| json!({
                "src": e.src,
                "dst": e.dst,
                "src_turn": self.nodes[e.src].turn,
                "dst_turn": self.nodes[e.dst].turn,
                "type": e.kind.name(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// State banks: one `[n_kind, d]` matrix per state kind, rows in node order.
#[derive(Clone, Debug)]
pub struct GraphStates<'a> {
    pub banks: [Option<Var<'a>>; 3],
}

impl<'a> GraphStates<'a> {
    pub fn get(&self, kind: StateKind) -> Option<Var<'a>> {
        self.banks[kind.index()]
    }

    pub fn semantics(&self) -> Var<'a> {
        self.banks[0].expect("semantics bank always present")
    }
}

/// Semantics and strategy states start as copies of the CLS state; emotion
/// states add the per-seeker knowledge vector. `knowledge` has one row per
/// seeker node and may be absent when there are none.
pub fn init_states<'a>(
    graph: &TransitionGraph,
    cls_states: Var<'a>,
    knowledge: Option<Var<'a>>,
) -> Result<GraphStates<'a>> {
    if cls_states.rows() != graph.len() {
        return Err(Error::contract(format!(
            "{} CLS states for {} graph nodes",
            cls_states.rows(),
            graph.len()
        )));
    }
    let d = cls_states.cols();
    let bank = |kind| -> Result<Option<Var<'a>>> {
        let rows = graph.nodes_with(kind);
        if rows.is_empty() {
            Ok(None)
        } else {
            Ok(Some(cls_states.gather_rows(&rows)?))
        }
    };
    let sem = cls_states.gather_rows(&(0..graph.len()).collect::<Vec<_>>())?;
    let strat = bank(StateKind::Strategy)?;
    let emo = match bank(StateKind::Emotion)? {
        None => None,
        Some(cls) => {
            let k = knowledge.ok_or_else(|| Error::contract("seeker nodes need knowledge vectors"))?;
            if k.cols() != d {
                return Err(Error::config(format!("knowledge dimension {} differs from model dimension {d}", k.cols())));
            }
            if k.rows() != cls.rows() {
                return Err(Error::dim(format!("{} knowledge rows for {} seeker nodes", k.rows(), cls.rows())));
            }
            Some(cls.add(k)?)
        }
    };
    Ok(GraphStates { banks: [Some(sem), strat, emo] })
}

/// One attention link from `src` row to `dst` row, typed by a relation index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Link {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
}

pub struct RelationAttentionOutput<'a> {
    pub output: Var<'a>,
    /// Per-head `[n_dst, n_links]` weights; absent when there are no links.
    pub weights: Vec<Var<'a>>,
    pub has_incoming: Vec<bool>,
}

/// Multi-head attention restricted to `links`, with the relation embedding
/// of each link added to its query and key. Destination rows without any
/// link are passed through unchanged.
pub fn relation_attention<'a>(
    attn: &MultiHeadAttention,
    cx: &Ctx<'a>,
    dest: Var<'a>,
    sources: Var<'a>,
    links: &[Link],
    relations: Var<'a>,
) -> Result<RelationAttentionOutput<'a>> {
    let (n_dst, n_src, n_rel) = (dest.rows(), sources.rows(), relations.rows());
    let mut has_incoming = vec![false; n_dst];
    for l in links {
        if l.relation >= n_rel {
            return Err(Error::contract(format!("unknown edge type {}", l.relation)));
        }
        if l.src >= n_src || l.dst >= n_dst {
            return Err(Error::contract(format!("link {}->{} outside {n_src}x{n_dst} states", l.src, l.dst)));
        }
        has_incoming[l.dst] = true;
    }
    if links.is_empty() {
        return Ok(RelationAttentionOutput { output: dest, weights: Vec::new(), has_incoming });
    }

    let e = links.len();
    let dst: Vec<usize> = links.iter().map(|l| l.dst).collect();
    let src: Vec<usize> = links.iter().map(|l| l.src).collect();
    let rel: Vec<usize> = links.iter().map(|l| l.relation).collect();
    let r = relations.gather_rows(&rel)?;
    let src_rows = sources.gather_rows(&src)?;
    let q = attn.query.forward(cx, dest.gather_rows(&dst)?.add(r)?)?;
    let k = attn.key.forward(cx, src_rows.add(r)?)?;
    let v = attn.value.forward(cx, src_rows)?;

    let hd = attn.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let slots: Vec<usize> = links.iter().enumerate().map(|(i, l)| l.dst * e + i).collect();
    let mut heads = Vec::with_capacity(attn.heads);
    let mut weights = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let (a, b) = (h * hd, (h + 1) * hd);
        let scores = q.slice_cols(a, b)?.mul(k.slice_cols(a, b)?)?.sum_cols().scale(scale);
        let w = scores.scatter(vec![n_dst, e], &slots, MASK_FILL)?.softmax()?;
        heads.push(w.matmul(v.slice_cols(a, b)?)?);
        weights.push(w);
    }
    let merged = if heads.len() == 1 { heads[0] } else { Var::concat_cols(&heads)? };
    let attended = attn.output.forward(cx, merged)?;
    Ok(RelationAttentionOutput {
        output: select_rows(attended, dest, &has_incoming)?,
        weights,
        has_incoming,
    })
}

/// Row `i` from `a` where `take_a[i]`, otherwise from `b`.
fn select_rows<'a>(a: Var<'a>, b: Var<'a>, take_a: &[bool]) -> Result<Var<'a>> {
    if take_a.iter().all(|&t| t) {
        return Ok(a);
    }
    if !take_a.iter().any(|&t| t) {
        return Ok(b);
    }
    let n = take_a.len();
    let pick: Vec<usize> = (0..n).map(|i| if take_a[i] { i } else { n + i }).collect();
    Var::concat_rows(&[a, b])?.gather_rows(&pick)
}

#[derive(Clone, Debug)]
pub struct InteractBlock {
    pub kind: StateKind,
    pub attention: MultiHeadAttention,
    pub gate: GatedFusion,
}

#[derive(Clone, Debug)]
pub struct TransitionNetwork {
    /// `[7, d]` edge-type embeddings.
    pub relations: ParamId,
    /// Transit attention per state kind.
    pub transit: Vec<MultiHeadAttention>,
    /// Interact attention plus fusion gate for every kind that receives interaction edges.
    pub interact: Vec<InteractBlock>,
}

#[derive(Clone, Debug)]
pub struct TtiOutput<'a> {
    pub initial: GraphStates<'a>,
    pub transited: GraphStates<'a>,
    pub interacted: GraphStates<'a>,
    pub fused: GraphStates<'a>,
    /// Gate values per kind (computed on every row of the bank).
    pub gates: [Option<Var<'a>>; 3],
}

impl TransitionNetwork {
    pub fn new(store: &mut ParamStore, init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        let relations = store.add("graph.relations", init.normal(&[EdgeType::COUNT, dim], 1.0 / (dim as f64).sqrt()))?;
        let transit = StateKind::ALL
            .iter()
            .map(|k| MultiHeadAttention::new(store, init, &format!("graph.transit.{}", k.short()), dim, heads))
            .collect::<Result<_>>()?;
        let mut interact = Vec::new();
        for kind in StateKind::ALL {
            if EdgeType::ALL.iter().any(|e| e.group() == EdgeGroup::Interaction && e.target() == kind) {
                interact.push(InteractBlock {
                    kind,
                    attention: MultiHeadAttention::new(store, init, &format!("graph.interact.{}", kind.short()), dim, heads)?,
                    gate: GatedFusion::new(store, init, &format!("graph.gate.{}", kind.short()), dim)?,
                });
            }
        }
        Ok(TransitionNetwork { relations, transit, interact })
    }

    pub fn forward<'a>(&self, cx: &Ctx<'a>, graph: &TransitionGraph, initial: GraphStates<'a>) -> Result<TtiOutput<'a>> {
        let relations = cx.p(self.relations);

        // step 1: same-kind transitions
        let mut transited = initial.clone();
        for kind in StateKind::ALL {
            let Some(bank) = initial.get(kind) else { continue };
            let links: Vec<Link> = graph
                .edges
                .iter()
                .filter(|e| e.kind.group() == EdgeGroup::Transition && e.kind.target() == kind)
                .map(|e| link(graph, e, 0))
                .collect();
            transited.banks[kind.index()] =
                Some(relation_attention(&self.transit[kind.index()], cx, bank, bank, &links, relations)?.output);
        }

        // step 2: cross-kind interactions over the transited states
        let mut offsets = [0usize; 3];
        let mut parts = Vec::new();
        let mut total = 0;
        for kind in StateKind::ALL {
            offsets[kind.index()] = total;
            if let Some(b) = transited.get(kind) {
                total += b.rows();
                parts.push(b);
            }
        }
        let pool = Var::concat_rows(&parts)?;

        let mut interacted = transited.clone();
        let mut fused = transited.clone();
        let mut gates = [None; 3];
        for block in &self.interact {
            let kind = block.kind;
            let Some(s1) = transited.get(kind) else { continue };
            let links: Vec<Link> = graph
                .edges
                .iter()
                .filter(|e| e.kind.group() == EdgeGroup::Interaction && e.kind.target() == kind)
                .map(|e| link(graph, e, offsets[e.kind.source().index()]))
                .collect();
            let out = relation_attention(&block.attention, cx, s1, pool, &links, relations)?;
            let s2 = out.output;
            interacted.banks[kind.index()] = Some(s2);
            let (g_out, g) = block.gate.fuse(cx, s1, s2)?;
            gates[kind.index()] = Some(g);
            fused.banks[kind.index()] = Some(select_rows(g_out, s1, &out.has_incoming)?);
        }
        Ok(TtiOutput { initial, transited, interacted, fused, gates })
    }
}

fn link(graph: &TransitionGraph, e: &Edge, src_offset: usize) -> Link {
    Link {
        src: src_offset + graph.row_of(e.kind.source(), e.src).expect("applicable edge"),
        dst: graph.row_of(e.kind.target(), e.dst).expect("applicable edge"),
        relation: e.kind.index(),
    }
}
