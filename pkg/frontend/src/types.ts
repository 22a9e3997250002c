// Wire types mirroring the engine's scene/plan/session JSON formats.

export interface PoseDoc {
  position: [number, number, number];
  yaw: number;
}

export interface NodeDoc {
  id: string;
  label: string;
  category: string;
  half_extents: [number, number, number];
  mass: number;
  pose: PoseDoc | null;
  states: Record<string, boolean>;
  is_container: boolean;
  is_base: boolean;
}

export interface EdgeDoc {
  kind: string;
  parent: string;
  child: string;
  source: string;
  step_index?: number | null;
}

export interface SceneDocument {
  nodes: NodeDoc[];
  edges: EdgeDoc[];
  groups?: unknown[];
}

export interface SessionInfo {
  id: string;
  status: string;
  loop_iteration: number;
  instruction: string;
  pending_events: unknown[];
  failure_reason: string | null;
}

export interface StepResult {
  status: string;
  loop_iteration: number;
  events: EventDoc[];
  feasible: boolean;
  outcome_ok: boolean;
  breakdown: Record<string, number> | null;
  failure_reason?: string | null;
}

export interface EventDoc {
  kind: string;
  origin: string;
  payload: Record<string, unknown>;
  seq?: number;
}

export interface PoseDelta {
  id: string;
  before: PoseDoc | null;
  after: PoseDoc | null;
}

export interface AdjustmentResult {
  record_id: string | null;
  pose_deltas: PoseDelta[];
  status: string;
}

export interface TranscriptEntry {
  seq: number;
  type: string;
  [key: string]: unknown;
}
