"""Subnet topology and XOR trusted relay between subnets.

Users are addressed as ``(subnet, index)``; index 0 of every subnet is the
member housed in the central node.  Users of one subnet share keys directly
from their pairwise sessions.  For users in different subnets, the central
node XORs the two keys it holds with them (``k_u ^ k_v``) and sends the
result to ``u``, who recovers ``k_v`` with a second XOR.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np

CENTRAL_INDEX = 0
DIRECT = "direct"
RELAYED = "relayed-via-central"
CO_LOCATED = "co-located"


class RouteUnavailableError(LookupError):
    """A prerequisite session key is missing."""


def _pair(u, v) -> tuple:
    return tuple(sorted((tuple(u), tuple(v))))


@dataclass(frozen=True)
class Topology:
    m_subnets: int
    n_users_per_subnet: int

    def __post_init__(self):
        if self.m_subnets < 1:
            raise ValueError("need at least one subnet")
        if self.n_users_per_subnet < 2:
            raise ValueError("a subnet needs a central member and at least one end user")

    @property
    def central_members(self) -> list[tuple[int, int]]:
        return [(m, CENTRAL_INDEX) for m in range(self.m_subnets)]

    @property
    def end_users(self) -> list[tuple[int, int]]:
        return [(m, i) for m in range(self.m_subnets) for i in range(1, self.n_users_per_subnet)]

    @property
    def all_users(self) -> list[tuple[int, int]]:
        return [(m, i) for m in range(self.m_subnets) for i in range(self.n_users_per_subnet)]

    def central_of(self, user) -> tuple[int, int]:
        self.check(user)
        return (user[0], CENTRAL_INDEX)

    def check(self, user) -> None:
        m, i = user
        if not (0 <= m < self.m_subnets and 0 <= i < self.n_users_per_subnet):
            raise ValueError(f"user {tuple(user)} not in topology")

    def intra_subnet_pairs(self, subnet: int) -> list[tuple]:
        members = [(subnet, i) for i in range(self.n_users_per_subnet)]
        return list(itertools.combinations(members, 2))

    def summary(self) -> dict:
        return {
            "m_subnets": self.m_subnets,
            "n_users_per_subnet": self.n_users_per_subnet,
            "end_users": len(self.end_users),
            "central_members": len(self.central_members),
            "total_users": len(self.all_users),
            "intra_subnet_pairs_per_subnet": len(self.intra_subnet_pairs(0)),
        }

    def to_json(self) -> str:
        return json.dumps({**self.summary(), "central_members_list": self.central_members},
                          sort_keys=True, indent=2)


def build_topology(m_subnets: int = 16, n_users_per_subnet: int = 8) -> Topology:
    return Topology(m_subnets, n_users_per_subnet)


def xor_relay(key_ac, key_bc) -> np.ndarray:
    a = np.asarray(key_ac, dtype=np.uint8)
    b = np.asarray(key_bc, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValueError(f"key length mismatch: {a.size} vs {b.size} bits")
    return np.bitwise_xor(a, b)


@dataclass
class RouteRecord:
    u: tuple
    v: tuple
    provenance: str
    sessions: list  # the direct session pairs the key depends on
    key_bits: int
    relay_via: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class KeyStore:
    """Session keys as held by each endpoint, plus relay traffic."""

    held: dict = field(default_factory=dict)  # (pair, holder) -> bits
    provenance: dict = field(default_factory=dict)  # pair -> DIRECT | RELAYED
    relay_log: list = field(default_factory=list)

    def add_session(self, u, v, key_u, key_v) -> None:
        pair = _pair(u, v)
        self.held[(pair, tuple(u))] = np.asarray(key_u, dtype=np.uint8)
        self.held[(pair, tuple(v))] = np.asarray(key_v, dtype=np.uint8)
        self.provenance[pair] = DIRECT

    def key(self, holder, peer) -> np.ndarray:
        try:
            return self.held[(_pair(holder, peer), tuple(holder))]
        except KeyError:
            raise RouteUnavailableError(f"no key between {tuple(holder)} and {tuple(peer)}") from None

    def has(self, u, v) -> bool:
        pair = _pair(u, v)
        return (pair, tuple(u)) in self.held and (pair, tuple(v)) in self.held

    def drop_user(self, user) -> "KeyStore":
        """Copy without any direct session involving ``user``."""
        user = tuple(user)
        out = KeyStore()
        for (pair, holder), bits in self.held.items():
            if user not in pair and self.provenance.get(pair) == DIRECT:
                out.held[(pair, holder)] = bits
                out.provenance[pair] = DIRECT
        return out


def establish_end_to_end(u, v, topology: Topology, store: KeyStore):
    """Shared key between ``u`` and ``v``; returns ``(key_u, key_v, RouteRecord)``.

    Relayed keys are also recorded in ``store`` with provenance
    ``relayed-via-central``.
    """
    u, v = tuple(u), tuple(v)
    topology.check(u)
    topology.check(v)
    if u == v:
        raise ValueError("cannot establish a key between a user and itself")
    if u[0] == v[0]:
        if not store.has(u, v):
            raise RouteUnavailableError(f"no direct session between {u} and {v}")
        key_u, key_v = store.key(u, v), store.key(v, u)
        return key_u, key_v, RouteRecord(u, v, DIRECT, [_pair(u, v)], int(key_u.size))

    cu, cv = topology.central_of(u), topology.central_of(v)
    legs = [(u, cu), (v, cv)]
    for end, central in legs:
        if end != central and not store.has(end, central):
            raise RouteUnavailableError(f"no session between {end} and central member {central}")

    def leg_keys(end, central):
        # A central member needs no quantum link to the central node: its own
        # leg is the identity (it knows its half of the relay directly).
        if end == central:
            return None
        return store.key(end, central), store.key(central, end)

    leg_u, leg_v = leg_keys(u, cu), leg_keys(v, cv)
    sessions = [_pair(e, c) for e, c in legs if e != c]
    if leg_u is None and leg_v is None:
        # Both are central members inside the same trusted node; there is no
        # quantum link to key and nothing to relay.
        empty = np.empty(0, dtype=np.uint8)
        pair = _pair(u, v)
        store.held[(pair, u)] = empty
        store.held[(pair, v)] = empty.copy()
        store.provenance[pair] = CO_LOCATED
        return empty, empty.copy(), RouteRecord(u, v, CO_LOCATED, [], 0, relay_via="central")
    if leg_u is None or leg_v is None:
        # One endpoint sits in the central node: it simply forwards the other
        # leg's key over the trusted node (no XOR needed).
        end_key, central_key = leg_v if leg_u is None else leg_u
        key_end, key_central = end_key.copy(), central_key.copy()
        key_u, key_v = (key_central, key_end) if leg_u is None else (key_end, key_central)
    else:
        n = min(leg_u[0].size, leg_v[0].size)
        k_u_side, k_cu = leg_u[0][:n], leg_u[1][:n]
        k_v_side, k_cv = leg_v[0][:n], leg_v[1][:n]
        relay = xor_relay(k_cu, k_cv)
        store.relay_log.append(((u, v), relay))
        key_u = xor_relay(relay, k_u_side)  # u decodes v's key
        key_v = k_v_side.copy()
    pair = _pair(u, v)
    store.held[(pair, u)] = key_u
    store.held[(pair, v)] = key_v
    store.provenance[pair] = RELAYED
    record = RouteRecord(u, v, RELAYED, sessions, int(key_u.size), relay_via="central")
    return key_u, key_v, record
