// Wire types shared with the inference server's /v1/chat and /v1/stats.

export interface StageTimings {
  t_ve: number;
  t_prompt: number;
  t_gen: number;
  t_other: number;
  t_total: number;
  n_prompt: number;
  n_gen: number;
  s_prompt: number | null;
  s_gen: number | null;
}

export type ChatEvent =
  | { type: "token"; text: string; index: number }
  | { type: "done"; stats: StageTimings }
  | { type: "error"; status?: number; message: string };

export interface ChatMessage {
  role: "user" | "assistant";
  content: string;
  image_b64?: string;
}

export interface GenerationOptions {
  max_new_tokens?: number;
  temperature?: number;
  top_p?: number;
  seed?: number;
  stop_ids?: number[];
}

export interface ChatRequest {
  session_id?: string;
  messages: ChatMessage[];
  stream: boolean;
  generation?: GenerationOptions;
}

export interface ChatResponse {
  text: string;
  stats: StageTimings;
}

export interface ServerStats {
  model: {
    name: string;
    precision: string;
    size_bytes: number;
    n_visual_tokens: number;
  };
  runs: {
    count: number;
    median_s_prompt: number | null;
    median_s_gen: number | null;
  };
}
