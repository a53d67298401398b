"""Extraction of segments into portable parts and their attachment to avatars.

Parts keep their Gaussians in triangle-local coordinates together with the
triangle indices they are bound to. Because rigged avatars share the mesh
topology, attaching a part to another avatar only requires re-using the
same triangle indices; the target's frames then place it.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .avatar import Avatar, Gaussians, Mesh, global_to_local, local_to_global, to_global_space
from .clustering import NOISE, Segmentation
from .errors import EmptySelection, TopologyMismatch

STRATEGIES = ("replacement", "overlap")


def topology_fingerprint(mesh: Mesh) -> str:
    return hashlib.sha1(np.ascontiguousarray(mesh.triangles, dtype=np.int64).tobytes()).hexdigest()


@dataclass
class SegmentArchive:
    gaussians: Gaussians  # triangle-local
    triangles: np.ndarray  # sorted unique triangle indices referenced
    source_id: str
    tag: str
    n_triangles: int  # triangle count of the source mesh
    topology: str = ""  # fingerprint of the source triangle list
    params: dict = field(default_factory=dict)
    space: str = "local"

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.space != "local":
            raise ValueError("segment archives hold triangle-local Gaussians")
        if not np.all(np.isin(self.gaussians.binding, self.triangles)):
            raise ValueError("archive references triangles missing from its triangle set")

    def __len__(self):
        return len(self.gaussians)


@dataclass(frozen=True)
class MergeConfig:
    strategy: str = "replacement"
    n: int = 0
    o: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.n < 0:
            raise ValueError("replacement threshold n must be non-negative")
        if not 0.0 <= self.o <= 1.0:
            raise ValueError("overlap factor o must lie in [0, 1]")


def extract_segment(avatar: Avatar, seg: Segmentation, channel: int, cluster: int | None = None,
                    tag: str = "") -> SegmentArchive:
    """Pull one cluster (or every clustered member of a channel) out as a part."""
    if len(seg) != len(avatar):
        raise ValueError("segmentation and avatar differ in length")
    sel = (seg.channel == channel) & (seg.cluster != NOISE)
    if cluster is not None:
        sel &= seg.cluster == cluster
    idx = np.flatnonzero(sel)
    if len(idx) == 0:
        raise EmptySelection(f"no Gaussians in channel {channel}, cluster {cluster}")
    glob = to_global_space(avatar).gaussians[idx]
    local = global_to_local(glob, avatar.frames[glob.binding])
    return SegmentArchive(
        gaussians=local, triangles=np.unique(local.binding), source_id=avatar.name,
        tag=tag, n_triangles=avatar.mesh.n_triangles, topology=topology_fingerprint(avatar.mesh),
        params={"channel": int(channel), "cluster": None if cluster is None else int(cluster)},
    )


def group_by_triangle(gaussians: Gaussians) -> dict:
    """Partition Gaussians by their bound triangle index."""
    out = {}
    if len(gaussians) == 0:
        return out
    order = np.argsort(gaussians.binding, kind="stable")
    tris, starts = np.unique(gaussians.binding[order], return_index=True)
    for t, rows in zip(tris, np.split(order, starts[1:])):
        out[int(t)] = gaussians[rows]
    return out


def _check_topology(target: Avatar, part: SegmentArchive) -> None:
    if target.mesh.n_triangles != part.n_triangles:
        raise TopologyMismatch(f"target mesh has {target.mesh.n_triangles} triangles, "
                               f"part was extracted from a mesh with {part.n_triangles}")
    if part.topology and part.topology != topology_fingerprint(target.mesh):
        raise TopologyMismatch("target mesh connectivity differs from the part's source mesh")


def _part_in_target_space(target: Avatar, part: SegmentArchive) -> Gaussians:
    if target.space == "local":
        return part.gaussians.copy()
    return local_to_global(part.gaussians, target.frames[part.gaussians.binding])


def _part_counts(target: Avatar, part: SegmentArchive) -> np.ndarray:
    return np.bincount(part.gaussians.binding, minlength=target.mesh.n_triangles)


def merge_replacement(target: Avatar, part: SegmentArchive, n: int) -> Avatar:
    """Attach ``part``; triangles holding more than ``n`` part Gaussians lose
    their original Gaussians."""
    if n < 0:
        raise ValueError("replacement threshold n must be non-negative")
    _check_topology(target, part)
    replaced = _part_counts(target, part) > n
    keep = ~replaced[target.gaussians.binding]
    merged = Gaussians.concat([target.gaussians[np.flatnonzero(keep)], _part_in_target_space(target, part)])
    return Avatar(target.mesh, merged, target.space, f"{target.name}+{part.tag or 'part'}",
                  frame_cache=target.frame_cache)


def merge_overlap(target: Avatar, part: SegmentArchive, o: float) -> Avatar:
    """Attach ``part`` and scale the opacity of target Gaussians on its triangles by ``o``."""
    if not 0.0 <= o <= 1.0:
        raise ValueError("overlap factor o must lie in [0, 1]")
    _check_topology(target, part)
    touched = (_part_counts(target, part) > 0)[target.gaussians.binding]
    base = target.gaussians.copy()
    base.opacity[touched] = base.opacity[touched] * o
    merged = Gaussians.concat([base, _part_in_target_space(target, part)])
    return Avatar(target.mesh, merged, target.space, f"{target.name}+{part.tag or 'part'}",
                  frame_cache=target.frame_cache)


def merge(target: Avatar, part: SegmentArchive, config: MergeConfig) -> Avatar:
    if config.strategy == "replacement":
        return merge_replacement(target, part, config.n)
    return merge_overlap(target, part, config.o)
