"""Agent and graph networks.

PolicyNet: observation MLP -> goal embedding -> single-layer GRU belief
-> linear actor-critic heads. GraphEncoder: node embedder -> three graph
attention layers with relation-aware attention logits -> global max-pool
-> projection. ProjectionHeads map beliefs and graph codes into a shared
contrastive space.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .scenegraph import NODE_VOCAB_SIZE, NUM_RELATIONS, SceneGraph
from .sim.env import EGO_WINDOW, NUM_ACTIONS, OBS_CHANNELS, Observation
from .sim.house import CATEGORIES

OBS_DIM = EGO_WINDOW * EGO_WINDOW * OBS_CHANNELS
OBS_ENC_DIM = 128
GOAL_EMBED_DIM = 32
GRU_INPUT_DIM = OBS_ENC_DIM + GOAL_EMBED_DIM
BELIEF_DIM = 512
NODE_EMBED_DIM = 32
GAT_DIM = 64
GAT_HEADS = 4
EDGE_EMBED_DIM = 16
GRAPH_CODE_DIM = 128
PROJECTION_DIM = 128


def _init(rng: np.random.Generator, shape, scale: float | None = None):
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return rng.normal(0.0, scale, size=shape)


class Module:
    """Flat parameter registry shared by every network in this file."""

    def __init__(self):
        self._params: list[Parameter] = []
        self._children: list[Module] = []

    def param(self, name: str, data, trainable: bool = True) -> Parameter:
        p = Parameter(name, data, trainable=trainable)
        self._params.append(p)
        return p

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Parameter]:
        out = list(self._params)
        for c in self._children:
            out.extend(c.parameters())
        return out

    def set_trainable(self, trainable: bool) -> None:
        for p in self.parameters():
            p.trainable = trainable
            p.requires_grad = trainable


class Linear(Module):
    def __init__(self, name: str, rng, n_in: int, n_out: int,
                 zero_init: bool = False):
        super().__init__()
        w = np.zeros((n_in, n_out)) if zero_init else _init(rng, (n_in, n_out))
        self.w = self.param(f"{name}.w", w)
        self.b = self.param(f"{name}.b", np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), ad.reshape(self.b, (1, -1)))


class GRUCell(Module):
    """Single-layer GRU; hidden state stays in (-1, 1) elementwise."""

    def __init__(self, name: str, rng, n_in: int, n_hidden: int):
        super().__init__()
        self.n_hidden = n_hidden
        self.wx = self.param(f"{name}.wx", _init(rng, (n_in, 3 * n_hidden)))
        self.wh = self.param(f"{name}.wh", _init(rng, (n_hidden, 3 * n_hidden)))
        self.b = self.param(f"{name}.b", np.zeros(3 * n_hidden))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        nh = self.n_hidden
        gx = ad.add(ad.matmul(x, self.wx), ad.reshape(self.b, (1, -1)))
        gh = ad.matmul(h, self.wh)
        gxz = ad.slice_cols(gx, 0, nh)
        gxr = ad.slice_cols(gx, nh, 2 * nh)
        gxn = ad.slice_cols(gx, 2 * nh, 3 * nh)
        ghz = ad.slice_cols(gh, 0, nh)
        ghr = ad.slice_cols(gh, nh, 2 * nh)
        ghn = ad.slice_cols(gh, 2 * nh, 3 * nh)
        z = ad.sigmoid(ad.add(gxz, ghz))
        r = ad.sigmoid(ad.add(gxr, ghr))
        n = ad.tanh(ad.add(gxn, ad.mul(r, ghn)))
        one_minus_z = ad.sub(Tensor(np.ones(1)), z)
        return ad.add(ad.mul(one_minus_z, n), ad.mul(z, h))


class PolicyNet(Module):
    """Observation encoder, goal embedding, GRU belief, actor-critic heads."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.enc1 = self.child(Linear("policy.enc1", rng, OBS_DIM, OBS_ENC_DIM))
        self.enc2 = self.child(Linear("policy.enc2", rng, OBS_ENC_DIM,
                                      OBS_ENC_DIM))
        self.goal_embed = self.param("policy.goal_embed",
                                     _init(rng, (len(CATEGORIES),
                                                 GOAL_EMBED_DIM), 0.1))
        self.gru = self.child(GRUCell("policy.gru", rng, GRU_INPUT_DIM,
                                      BELIEF_DIM))
        # Zero-init heads: uniform policy, zero value at initialization.
        self.actor = self.child(Linear("policy.actor", rng, BELIEF_DIM,
                                       NUM_ACTIONS, zero_init=True))
        self.critic = self.child(Linear("policy.critic", rng, BELIEF_DIM, 1,
                                        zero_init=True))

    def encode_obs(self, obs_flat: Tensor, goal_ids) -> Tensor:
        x = ad.relu(self.enc1(obs_flat))
        x = ad.relu(self.enc2(x))
        goal = ad.gather_rows(self.goal_embed, np.asarray(goal_ids))
        return ad.concat([x, goal], axis=1)

    def forward(self, obs_flat: Tensor, goal_ids, h: Tensor):
        """-> (logits, value, new belief); inputs are (B, .) batches."""
        x = self.encode_obs(obs_flat, goal_ids)
        b = self.gru(x, h)
        logits = self.actor(b)
        value = self.critic(b)
        return logits, value, b

    def forward_obs(self, obs: Observation, h: Tensor):
        flat = Tensor(obs.ego_grid.reshape(1, -1))
        return self.forward(flat, [obs.goal_id], h)


def observations_to_batch(observations) -> tuple[np.ndarray, np.ndarray]:
    flat = np.stack([o.ego_grid.reshape(-1) for o in observations])
    goals = np.array([o.goal_id for o in observations])
    return flat, goals


class GATLayer(Module):
    """Graph attention with relation features in the attention logits.

    Per head: logit(i<-j) = leaky_relu(a1.Wh_i + a2.Wh_j + a3.(We r_ij)),
    softmax over the in-neighborhood of i (self-loop included), weighted
    sum of Wh_j, relu; heads averaged.
    """

    def __init__(self, name: str, rng, n_in: int, n_out: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ws = [self.param(f"{name}.w{k}", _init(rng, (n_in, n_out)))
                   for k in range(heads)]
        self.a1 = [self.param(f"{name}.a1_{k}", _init(rng, (n_out, 1)))
                   for k in range(heads)]
        self.a2 = [self.param(f"{name}.a2_{k}", _init(rng, (n_out, 1)))
                   for k in range(heads)]
        self.a3 = [self.param(f"{name}.a3_{k}", _init(rng, (EDGE_EMBED_DIM, 1)))
                   for k in range(heads)]

    def __call__(self, feats: Tensor, in_mask: np.ndarray,
                 edge_embed: Tensor) -> Tensor:
        """feats (N, n_in); in_mask[i, j] true when j feeds i; edge_embed
        (N*N, EDGE_EMBED_DIM) for the flattened (i, j) pairs."""
        n = feats.shape[0]
        if n == 0:
            raise ValueError("empty graph")
        outputs = []
        blocked = ~in_mask
        for k in range(self.heads):
            wh = ad.matmul(feats, self.ws[k])
            s1 = ad.matmul(wh, self.a1[k])  # (N, 1)
            s2 = ad.matmul(wh, self.a2[k])  # (N, 1)
            srel = ad.reshape(ad.matmul(edge_embed, self.a3[k]), (n, n))
            logits = ad.add(ad.add(s1, ad.transpose(s2)), srel)
            logits = ad.leaky_relu(logits, 0.2)
            logits = ad.masked_fill(logits, blocked, -1e9)
            alpha = ad.row_softmax(logits)
            outputs.append(ad.matmul(alpha, wh))
        total = outputs[0]
        for o in outputs[1:]:
            total = ad.add(total, o)
        avg = ad.mul(total, Tensor(np.array(1.0 / self.heads)))
        return ad.relu(avg)


class GraphEncoder(Module):
    """SceneGraph -> fixed-size code via 3 GAT layers and global max-pool."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.cat_embed = self.param("graph.cat_embed",
                                    _init(rng, (NODE_VOCAB_SIZE,
                                                NODE_EMBED_DIM), 0.1))
        self.node_in = self.child(Linear("graph.node_in", rng,
                                         NODE_EMBED_DIM + 3, GAT_DIM))
        self.edge_embed = self.param("graph.edge_embed",
                                     _init(rng, (NUM_RELATIONS,
                                                 EDGE_EMBED_DIM)))
        self.gat = [self.child(GATLayer(f"graph.gat{i}", rng, GAT_DIM,
                                        GAT_DIM, GAT_HEADS))
                    for i in range(3)]
        self.out = self.child(Linear("graph.out", rng, GAT_DIM,
                                     GRAPH_CODE_DIM))

    @staticmethod
    def graph_arrays(g: SceneGraph):
        """Static per-graph inputs: category ids, positions, mask, edge hots.

        Nodes are put into a canonical order first so the encoding is
        exactly invariant to the input node ordering.
        """
        nodes = sorted(g.nodes, key=lambda node: (int(node.kind), node.ref))
        n = len(nodes)
        order = {node.node_id: i for i, node in enumerate(nodes)}
        cats = np.array([node.category_index for node in nodes])
        pos = np.array([node.rel_position for node in nodes], dtype=float)
        in_mask = np.eye(n, dtype=bool)  # self-loops
        rel_hot = np.zeros((n, n, NUM_RELATIONS))
        for src, dst, rel in g.edges:
            i, j = order[dst], order[src]
            in_mask[i, j] = True
            rel_hot[i, j, int(rel)] = 1.0
        return cats, pos, in_mask, rel_hot

    def encode(self, g: SceneGraph) -> Tensor:
        """-> (1, GRAPH_CODE_DIM) graph code."""
        if not g.nodes:
            raise ValueError("cannot encode an empty graph")
        cats, pos, in_mask, rel_hot = self.graph_arrays(g)
        n = len(g.nodes)
        x = ad.concat([ad.gather_rows(self.cat_embed, cats), Tensor(pos)],
                      axis=1)
        x = ad.relu(self.node_in(x))
        edge_embed = ad.matmul(Tensor(rel_hot.reshape(n * n, NUM_RELATIONS)),
                               self.edge_embed)
        for layer in self.gat:
            x = layer(x, in_mask, edge_embed)
        pooled = ad.reshape(ad.row_max_pool(x, axis=0), (1, -1))
        return self.out(pooled)


class ProjectionHeads(Module):
    """mlp_b and mlp_g into the shared contrastive space."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.b1 = self.child(Linear("proj.b1", rng, BELIEF_DIM, 256))
        self.b2 = self.child(Linear("proj.b2", rng, 256, PROJECTION_DIM))
        self.g1 = self.child(Linear("proj.g1", rng, GRAPH_CODE_DIM, 256))
        self.g2 = self.child(Linear("proj.g2", rng, 256, PROJECTION_DIM))

    def project_belief(self, b: Tensor) -> Tensor:
        return self.b2(ad.relu(self.b1(b)))

    def project_graph(self, g: Tensor) -> Tensor:
        return self.g2(ad.relu(self.g1(g)))


class CPCAHead(Module):
    """Action-conditioned forward model for the contrastive predictive
    coding baseline: rolls the belief forward with a GRU over action
    embeddings and scores predictions against observation encodings."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.action_embed = self.param("cpca.action_embed",
                                       _init(rng, (NUM_ACTIONS, 32), 0.1))
        self.gru = self.child(GRUCell("cpca.gru", rng, 32, BELIEF_DIM))
        self.score = self.child(Linear("cpca.score", rng, BELIEF_DIM,
                                       GRU_INPUT_DIM))


class VisibilityHead(Module):
    """Linear per-category visibility predictor on the belief."""

    def __init__(self, rng: np.random.Generator):
        super().__init__()
        self.head = self.child(Linear("visibility.head", rng, BELIEF_DIM,
                                      len(CATEGORIES), zero_init=True))
