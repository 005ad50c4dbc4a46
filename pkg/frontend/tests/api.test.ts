import { describe, expect, it } from "vitest";
import { ApiError, EditClient } from "../src/api.js";
import { toBase64 } from "../src/b64.js";

type Call = { url: string; init?: RequestInit };

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}

function mockFetch(handler: (call: Call) => Response | Promise<Response>) {
  const calls: Call[] = [];
  const fetchFn = (async (input: any, init?: RequestInit) => {
    const call = { url: String(input), init };
    calls.push(call);
    return handler(call);
  }) as typeof fetch;
  return { calls, fetchFn };
}

describe("request plumbing", () => {
  it("parses healthz and strips trailing slashes from the base URL", async () => {
    const { calls, fetchFn } = mockFetch(() =>
      jsonResponse(200, { status: "ok", ckpt_hash: "abc", resolution: 64 }),
    );
    const client = new EditClient("http://svc:8000///", fetchFn);
    const health = await client.healthz();
    expect(health.resolution).toBe(64);
    expect(calls[0].url).toBe("http://svc:8000/v1/healthz");
  });

  it("sends the base image as base64 and returns the session id", async () => {
    const { calls, fetchFn } = mockFetch(() =>
      jsonResponse(200, { session_id: "s1", warning: "image resized" }),
    );
    const client = new EditClient("http://svc", fetchFn);
    const png = new Uint8Array([137, 80, 78, 71, 1, 2, 3]);
    const res = await client.createSession(png);
    expect(res.sessionId).toBe("s1");
    expect(res.warning).toMatch(/resized/);
    const body = JSON.parse(String(calls[0].init?.body));
    expect(body.image).toBe(toBase64(png));
  });

  it("only includes layers that were provided", async () => {
    const { calls, fetchFn } = mockFetch(() =>
      jsonResponse(200, {
        image: toBase64(new Uint8Array([1])),
        step_index: 1,
        timings: {},
        bg_max_dev: 0,
        seed: 7,
      }),
    );
    const client = new EditClient("http://svc", fetchFn);
    await client.edit("s1", {
      mask: new Uint8Array([9]),
      semantic: new Uint8Array([8]),
      seed: 7,
    });
    const body = JSON.parse(String(calls[0].init?.body));
    expect(Object.keys(body).sort()).toEqual(["attrs", "mask", "seed", "semantic"]);
    expect(body.seed).toBe(7);
    expect(calls[0].url).toBe("http://svc/v1/sessions/s1/edit");
  });

  it("decodes the edit response image from base64", async () => {
    const payload = new Uint8Array([5, 6, 7, 8]);
    const { fetchFn } = mockFetch(() =>
      jsonResponse(200, {
        image: toBase64(payload),
        step_index: 3,
        timings: { forward_ms: 12 },
        bg_max_dev: 0.001,
        seed: 0,
      }),
    );
    const client = new EditClient("http://svc", fetchFn);
    const res = await client.edit("s1", { mask: new Uint8Array([1]) });
    expect(res.image).toEqual(payload);
    expect(res.step_index).toBe(3);
    expect(res.bg_max_dev).toBeCloseTo(0.001);
  });
});

describe("error surfacing", () => {
  it("carries the service detail and status", async () => {
    const { fetchFn } = mockFetch(() => jsonResponse(422, { detail: "empty mask" }));
    const client = new EditClient("http://svc", fetchFn);
    const err = await client
      .edit("s1", { mask: new Uint8Array([1]) })
      .then(() => null, (e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(422);
    expect((err as ApiError).message).toBe("empty mask");
  });

  it("keeps the correlation id from internal errors", async () => {
    const { fetchFn } = mockFetch(() =>
      jsonResponse(500, { detail: "internal error", correlation_id: "deadbeef" }),
    );
    const client = new EditClient("http://svc", fetchFn);
    const err = (await client.undo("s1").catch((e: unknown) => e)) as ApiError;
    expect(err.correlationId).toBe("deadbeef");
    expect(err.display()).toContain("deadbeef");
    expect(err.display()).toContain("500");
  });

  it("copes with a non-JSON error body", async () => {
    const { fetchFn } = mockFetch(() => new Response("boom", { status: 502 }));
    const client = new EditClient("http://svc", fetchFn);
    const err = (await client.healthz().catch((e: unknown) => e)) as ApiError;
    expect(err.status).toBe(502);
    expect(err.message).toMatch(/502/);
  });

  it("wraps network failures instead of leaking raw TypeErrors", async () => {
    const fetchFn = (async () => {
      throw new TypeError("fetch failed");
    }) as typeof fetch;
    const client = new EditClient("http://svc", fetchFn);
    const err = (await client.healthz().catch((e: unknown) => e)) as ApiError;
    expect(err.status).toBe(0);
    expect(err.message).toMatch(/unreachable/);
  });
});

describe("single in-flight edit", () => {
  it("rejects a second mutation while one is pending, then recovers", async () => {
    let release: (r: Response) => void = () => {};
    const gate = new Promise<Response>((resolve) => (release = resolve));
    const ok = () =>
      jsonResponse(200, {
        image: toBase64(new Uint8Array([1])),
        step_index: 1,
        timings: {},
        bg_max_dev: 0,
        seed: 0,
      });
    let n = 0;
    const { fetchFn } = mockFetch(() => (n++ === 0 ? gate : ok()));
    const client = new EditClient("http://svc", fetchFn);
    const first = client.edit("s1", { mask: new Uint8Array([1]) });
    expect(client.busy).toBe(true);
    const second = (await client
      .edit("s1", { mask: new Uint8Array([1]) })
      .catch((e: unknown) => e)) as ApiError;
    expect(second.status).toBe(409);
    release(ok());
    await first;
    expect(client.busy).toBe(false);
    // a new edit goes through once the first settles
    const again = await client.edit("s1", { mask: new Uint8Array([1]) });
    expect(again.step_index).toBe(1);
  });
});
