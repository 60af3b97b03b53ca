/**
 * HTTP sidecar exposing the backend wire protocol: GET /meta, GET /healthz,
 * POST /embed, POST /generate.
 *
 * The HTTP layer accepts requests concurrently but inference is serialized
 * through a single model worker (batch size 1). Unknown image_refs return
 * 404 with the offending id; malformed bodies return 400; model failures
 * return 500.
 */

import express, { Express } from "express";
import { readFileSync } from "node:fs";
import path from "node:path";

import { TinyVlm } from "./model.js";
import { embedRequestSchema, generateRequestSchema } from "./protocol.js";

export interface SidecarConfig {
  modelId: string;
  device: "cpu";
  imageRoot: string;
  seed: number;
  dModel: number;
  systemPrompts: Partial<Record<"en" | "zh" | "ar", string>>;
  token?: string;
  port: number;
}

export const defaultConfig: SidecarConfig = {
  modelId: "tiny-vlm",
  device: "cpu",
  imageRoot: "images",
  seed: 7,
  dModel: 64,
  systemPrompts: {},
  port: 8700,
};

class ImageNotFound extends Error {
  constructor(readonly imageRef: string) {
    super(`unknown image_ref '${imageRef}'`);
  }
}

function loadImage(root: string, imageRef: string): Uint8Array {
  const resolvedRoot = path.resolve(root);
  const candidate = path.resolve(resolvedRoot, imageRef);
  if (candidate !== resolvedRoot && !candidate.startsWith(resolvedRoot + path.sep)) {
    throw new ImageNotFound(imageRef);
  }
  try {
    return new Uint8Array(readFileSync(candidate));
  } catch {
    throw new ImageNotFound(imageRef);
  }
}

/** Runs jobs one at a time in submission order. */
class SerialWorker {
  private queue: Promise<unknown> = Promise.resolve();

  run<T>(job: () => T): Promise<T> {
    const next = this.queue.then(() => job());
    this.queue = next.catch(() => undefined);
    return next;
  }
}

export function buildApp(config: Partial<SidecarConfig> = {}): Express {
  const cfg: SidecarConfig = { ...defaultConfig, ...config };
  const model = new TinyVlm(cfg.seed, cfg.dModel);
  const worker = new SerialWorker();
  const app = express();
  app.use(express.json({ limit: "4mb" }));

  app.use((req, res, next) => {
    if (cfg.token && req.header("X-Sidecar-Token") !== cfg.token) {
      res.status(401).json({ detail: "missing or invalid sidecar token" });
      return;
    }
    next();
  });

  app.get("/healthz", (_req, res) => {
    res.json({ status: "ok" });
  });

  app.get("/meta", (_req, res) => {
    res.json({ d_model: model.dModel, model_name: model.modelName });
  });

  app.post("/embed", async (req, res) => {
    const parsed = embedRequestSchema.safeParse(req.body);
    if (!parsed.success) {
      res.status(400).json({ detail: parsed.error.message });
      return;
    }
    const body = parsed.data;
    try {
      const image = loadImage(cfg.imageRoot, body.image_ref);
      const systemPrompt = body.system_prompt || cfg.systemPrompts[body.partition] || "";
      const pooled = await worker.run(() => model.embed(image, body.question, systemPrompt));
      res.json({
        q_pooled: Array.from(pooled.qPooled),
        v_pooled: Array.from(pooled.vPooled),
        d_model: model.dModel,
      });
    } catch (err) {
      if (err instanceof ImageNotFound) {
        res.status(404).json({ detail: err.message });
        return;
      }
      res.status(500).json({ detail: String(err) });
    }
  });

  app.post("/generate", async (req, res) => {
    const parsed = generateRequestSchema.safeParse(req.body);
    if (!parsed.success) {
      res.status(400).json({ detail: parsed.error.message });
      return;
    }
    const body = parsed.data;
    try {
      const image = loadImage(cfg.imageRoot, body.image_ref);
      const systemPrompt = body.system_prompt || cfg.systemPrompts[body.partition] || "";
      const answer = await worker.run(() =>
        model.generate(
          image,
          body.question,
          systemPrompt,
          body.wrapped_context ?? "",
          body.max_new_tokens,
        ),
      );
      res.json({ answer });
    } catch (err) {
      if (err instanceof ImageNotFound) {
        res.status(404).json({ detail: err.message });
        return;
      }
      res.status(500).json({ detail: String(err) });
    }
  });

  return app;
}

function parseArgs(argv: string[]): Partial<SidecarConfig> {
  const out: Partial<SidecarConfig> = {};
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const value = argv[i + 1];
    if (flag === "--port") out.port = Number(value);
    if (flag === "--images") out.imageRoot = value;
    if (flag === "--seed") out.seed = Number(value);
    if (flag === "--d-model") out.dModel = Number(value);
    if (flag === "--token") out.token = value;
  }
  return out;
}

const isMain = process.argv[1] && path.resolve(process.argv[1]) === new URL(import.meta.url).pathname;
if (isMain) {
  const overrides = parseArgs(process.argv.slice(2));
  const app = buildApp(overrides);
  const port = overrides.port ?? defaultConfig.port;
  const server = app.listen(port, () => {
    const address = server.address();
    const actual = typeof address === "object" && address ? address.port : port;
    console.log(`sidecar listening on ${actual}`);
  });
}
