/**
 * Entry point: `node dist/main.js <job-file>`.
 *
 * Speaks the sandbox protocol documented in ../docs/sandbox_protocol.md:
 * one JSON verdict line per test in job order, a terminal summary line,
 * exit 0 iff the protocol completed. A malformed job produces a single
 * {"error": ...} line and exit 2 before any verdict is emitted.
 */

import { readFileSync } from "node:fs";
import { runOne, RunOptions, TestPayload, Verdict } from "./run_test";

interface JobFile {
  code: string;
  entry_point: string;
  tests: { test_id: string; expression: string }[];
  per_test_timeout: number;
}

function emit(record: unknown): void {
  process.stdout.write(JSON.stringify(record) + "\n");
}

class MalformedJob extends Error {}

function asString(value: unknown, name: string): string {
  if (typeof value !== "string") {
    throw new MalformedJob(`field ${JSON.stringify(name)} must be a string`);
  }
  return value;
}

export function parseJob(raw: string): JobFile {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch (e) {
    throw new MalformedJob(`invalid JSON (${(e as Error).message})`);
  }
  if (typeof data !== "object" || data === null || Array.isArray(data)) {
    throw new MalformedJob("job must be a JSON object");
  }
  const job = data as Record<string, unknown>;
  for (const name of ["code", "entry_point", "tests", "per_test_timeout"]) {
    if (!(name in job)) {
      throw new MalformedJob(`missing field ${JSON.stringify(name)}`);
    }
  }
  const code = asString(job.code, "code");
  const entryPoint = asString(job.entry_point, "entry_point");
  const timeout = job.per_test_timeout;
  if (typeof timeout !== "number" || !Number.isFinite(timeout) || timeout <= 0) {
    throw new MalformedJob('field "per_test_timeout" must be a positive number');
  }
  if (!Array.isArray(job.tests)) {
    throw new MalformedJob('field "tests" must be an array');
  }
  const tests = job.tests.map((entry, i) => {
    if (typeof entry !== "object" || entry === null) {
      throw new MalformedJob(`tests[${i}] must be an object`);
    }
    const t = entry as Record<string, unknown>;
    return {
      test_id: asString(t.test_id, `tests[${i}].test_id`),
      expression: asString(t.expression, `tests[${i}].expression`),
    };
  });
  return { code, entry_point: entryPoint, tests, per_test_timeout: timeout };
}

export async function runJob(job: JobFile, options: RunOptions = {}): Promise<void> {
  let completed = 0;
  for (const test of job.tests) {
    const payload: TestPayload = {
      code: job.code,
      entry_point: job.entry_point,
      expression: test.expression,
    };
    const verdict: Verdict = await runOne(test.test_id, payload, job.per_test_timeout, options);
    emit(verdict);
    completed += 1;
  }
  emit({ summary: { completed, total: job.tests.length } });
}

export async function main(argv: string[]): Promise<number> {
  if (argv.length !== 1) {
    emit({ error: "usage: runner <job-file>" });
    return 2;
  }
  let job: JobFile;
  try {
    job = parseJob(readFileSync(argv[0] as string, "utf8"));
  } catch (e) {
    const reason = e instanceof MalformedJob ? e.message : (e as Error).message;
    emit({ error: `malformed job file: ${reason}` });
    return 2;
  }
  await runJob(job);
  return 0;
}

if (require.main === module) {
  main(process.argv.slice(2)).then((code) => process.exit(code));
}
