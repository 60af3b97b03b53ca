/** Wire-protocol schemas shared by every endpoint. Field names are fixed. */

import { z } from "zod";

export const partitionSchema = z.enum(["en", "zh", "ar"]);

export const embedRequestSchema = z
  .object({
    image_ref: z.string().min(1),
    question: z.string().min(1),
    partition: partitionSchema,
    system_prompt: z.string().default(""),
  })
  .strict();

export const generateRequestSchema = z
  .object({
    image_ref: z.string().min(1),
    question: z.string().min(1),
    partition: partitionSchema,
    system_prompt: z.string().default(""),
    max_new_tokens: z.number().int().positive().default(64),
    decoding: z.literal("greedy").default("greedy"),
    wrapped_context: z.string().optional(),
  })
  .strict();

export const metaResponseSchema = z.object({
  d_model: z.number().int().positive(),
  model_name: z.string(),
});

export const embedResponseSchema = z.object({
  q_pooled: z.array(z.number()),
  v_pooled: z.array(z.number()),
  d_model: z.number().int().positive(),
});

export const generateResponseSchema = z.object({
  answer: z.string(),
});

export type EmbedRequest = z.infer<typeof embedRequestSchema>;
export type GenerateRequest = z.infer<typeof generateRequestSchema>;
