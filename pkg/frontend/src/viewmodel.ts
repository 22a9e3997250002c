// View model for the top-down scene console.
//
// The model never invents scene state: everything rendered is the last
// server payload plus explicit local edits (drags, rotations, retargeted
// support edges), which are batched until the user submits the adjustment.

import type { EdgeDoc, NodeDoc, PoseDoc, SceneDocument } from "./types.js";

export interface ViewConfig {
  pixelsPerMeter: number;
  width: number;
  height: number;
}

export interface DrawRect {
  id: string;
  cx: number; // pixels
  cy: number;
  halfW: number;
  halfH: number;
  yaw: number;
  color: string;
  depth: number;
  isBase: boolean;
  containerBadge: "open" | "closed" | null;
  selected: boolean;
}

const SUPPORT_KINDS = new Set(["on", "in"]);

const PALETTE = [
  "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1",
  "#76b7b2", "#edc948", "#ff9da7", "#9c755f", "#bab0ac",
];

export function categoryColor(category: string): string {
  let hash = 0;
  for (let i = 0; i < category.length; i++) {
    hash = (hash * 31 + category.charCodeAt(i)) >>> 0;
  }
  return PALETTE[hash % PALETTE.length];
}

function clonePose(pose: PoseDoc): PoseDoc {
  return { position: [...pose.position] as [number, number, number], yaw: pose.yaw };
}

function containsPoint(node: NodeDoc, pose: PoseDoc, x: number, y: number): boolean {
  const dx = x - pose.position[0];
  const dy = y - pose.position[1];
  const c = Math.cos(pose.yaw);
  const s = Math.sin(pose.yaw);
  const lx = dx * c + dy * s;
  const ly = -dx * s + dy * c;
  return Math.abs(lx) <= node.half_extents[0] && Math.abs(ly) <= node.half_extents[1];
}

export class SceneViewModel {
  private serverScene: SceneDocument | null = null;
  private localPoses = new Map<string, PoseDoc>();
  private retargetedEdges = new Map<string, EdgeDoc>(); // child id -> new support edge
  selection: string | null = null;

  load(scene: SceneDocument): void {
    // a fresh server payload reconciles away all optimistic edits
    this.serverScene = scene;
    this.localPoses.clear();
    this.retargetedEdges.clear();
    if (this.selection && !scene.nodes.some((n) => n.id === this.selection)) {
      this.selection = null;
    }
  }

  get loaded(): boolean {
    return this.serverScene !== null;
  }

  get dirty(): boolean {
    return this.localPoses.size > 0 || this.retargetedEdges.size > 0;
  }

  nodes(): NodeDoc[] {
    return this.serverScene ? this.serverScene.nodes : [];
  }

  node(id: string): NodeDoc | undefined {
    return this.nodes().find((n) => n.id === id);
  }

  poseOf(id: string): PoseDoc | null {
    const local = this.localPoses.get(id);
    if (local) return local;
    return this.node(id)?.pose ?? null;
  }

  edges(): EdgeDoc[] {
    if (!this.serverScene) return [];
    const out: EdgeDoc[] = [];
    for (const edge of this.serverScene.edges) {
      if (SUPPORT_KINDS.has(edge.kind) && this.retargetedEdges.has(edge.child)) {
        continue; // replaced by a local retarget
      }
      out.push(edge);
    }
    for (const edge of this.retargetedEdges.values()) {
      out.push(edge);
    }
    return out;
  }

  supportParent(id: string): string | null {
    for (const edge of this.edges()) {
      if (SUPPORT_KINDS.has(edge.kind) && edge.child === id) return edge.parent;
    }
    return null;
  }

  depthOf(id: string): number {
    let depth = 0;
    let current: string | null = id;
    const limit = this.nodes().length + 1;
    while (depth <= limit) {
      current = this.supportParent(current!);
      if (current === null) return depth;
      depth += 1;
    }
    return depth;
  }

  // -- coordinate transforms (pixel y grows downward) ------------------------

  worldToPixel(cfg: ViewConfig, x: number, y: number): [number, number] {
    return [cfg.width / 2 + x * cfg.pixelsPerMeter, cfg.height / 2 - y * cfg.pixelsPerMeter];
  }

  pixelToWorld(cfg: ViewConfig, px: number, py: number): [number, number] {
    return [(px - cfg.width / 2) / cfg.pixelsPerMeter, (cfg.height / 2 - py) / cfg.pixelsPerMeter];
  }

  objectAt(cfg: ViewConfig, px: number, py: number): string | null {
    const [wx, wy] = this.pixelToWorld(cfg, px, py);
    let best: string | null = null;
    let bestDepth = -1;
    for (const node of this.nodes()) {
      const pose = this.poseOf(node.id);
      if (!pose || node.is_base) continue;
      if (containsPoint(node, pose, wx, wy)) {
        const depth = this.depthOf(node.id);
        if (depth > bestDepth) {
          best = node.id;
          bestDepth = depth;
        }
      }
    }
    if (best !== null) return best;
    for (const node of this.nodes()) {
      const pose = this.poseOf(node.id);
      if (pose && node.is_base && containsPoint(node, pose, wx, wy)) return node.id;
    }
    return null;
  }

  // -- edits ----------------------------------------------------------------------

  dragBy(cfg: ViewConfig, id: string, dxPx: number, dyPx: number): void {
    const node = this.node(id);
    const pose = this.poseOf(id);
    if (!node || node.is_base || !pose) return;
    const edited = clonePose(pose);
    edited.position[0] += dxPx / cfg.pixelsPerMeter;
    edited.position[1] -= dyPx / cfg.pixelsPerMeter;
    this.localPoses.set(id, edited);
  }

  rotate(id: string, dYaw: number): void {
    const node = this.node(id);
    const pose = this.poseOf(id);
    if (!node || node.is_base || !pose) return;
    const edited = clonePose(pose);
    const twoPi = 2 * Math.PI;
    edited.yaw = ((edited.yaw + dYaw) % twoPi + twoPi) % twoPi;
    this.localPoses.set(id, edited);
  }

  /** Drop resolution: rest the dragged object on whatever lies under its
   * centre (the tallest non-descendant there, else a base), updating both
   * its support edge and its height. */
  finishDrag(id: string): void {
    const pose = this.localPoses.get(id);
    const node = this.node(id);
    if (!pose || !node) return;
    const [x, y] = [pose.position[0], pose.position[1]];
    const descendants = this.descendantsOf(id);
    let target: NodeDoc | null = null;
    let targetTop = -Infinity;
    for (const candidate of this.nodes()) {
      if (candidate.id === id || descendants.has(candidate.id)) continue;
      const candidatePose = this.poseOf(candidate.id);
      if (!candidatePose) continue;
      if (!containsPoint(candidate, candidatePose, x, y)) continue;
      const top = candidatePose.position[2] + 2 * candidate.half_extents[2];
      if (top > targetTop) {
        target = candidate;
        targetTop = top;
      }
    }
    if (!target) return; // dropped in empty space: keep x, y but leave support
    pose.position[2] = targetTop;
    this.localPoses.set(id, pose);
    const previous = this.supportParent(id);
    if (previous !== target.id) {
      this.retargetedEdges.set(id, {
        kind: "on",
        parent: target.id,
        child: id,
        source: "human_adjustment",
      });
    }
  }

  private descendantsOf(id: string): Set<string> {
    const out = new Set<string>();
    const frontier = [id];
    while (frontier.length) {
      const current = frontier.pop()!;
      for (const edge of this.edges()) {
        if (SUPPORT_KINDS.has(edge.kind) && edge.parent === current && !out.has(edge.child)) {
          out.add(edge.child);
          frontier.push(edge.child);
        }
      }
    }
    return out;
  }

  clearEdits(): void {
    this.localPoses.clear();
    this.retargetedEdges.clear();
  }

  /** The scene to submit: server state plus the batched local edits. */
  adjustedScene(): SceneDocument {
    if (!this.serverScene) throw new Error("no scene loaded");
    return {
      nodes: this.serverScene.nodes.map((node) => {
        const local = this.localPoses.get(node.id);
        return local ? { ...node, pose: clonePose(local) } : node;
      }),
      edges: this.edges(),
    };
  }

  // -- rendering model ----------------------------------------------------------

  unplacedIds(): string[] {
    return this.nodes()
      .filter((n) => !this.poseOf(n.id))
      .map((n) => n.id)
      .sort();
  }

  computeDrawList(cfg: ViewConfig): DrawRect[] {
    const rects: DrawRect[] = [];
    for (const node of this.nodes()) {
      const pose = this.poseOf(node.id);
      if (!pose) continue;
      const [cx, cy] = this.worldToPixel(cfg, pose.position[0], pose.position[1]);
      let containerBadge: "open" | "closed" | null = null;
      if (node.is_container) {
        containerBadge = node.states["open"] ? "open" : "closed";
      }
      rects.push({
        id: node.id,
        cx,
        cy,
        halfW: node.half_extents[0] * cfg.pixelsPerMeter,
        halfH: node.half_extents[1] * cfg.pixelsPerMeter,
        yaw: pose.yaw,
        color: node.is_base ? "#d8d2c4" : categoryColor(node.category || node.label),
        depth: this.depthOf(node.id),
        isBase: node.is_base,
        containerBadge,
        selected: this.selection === node.id,
      });
    }
    rects.sort((a, b) => a.depth - b.depth || a.id.localeCompare(b.id));
    return rects;
  }
}
