import { ServiceClient } from "./api.js";
import { captureFrame, closeCamera, openCamera } from "./camera.js";
import { submitEnroll, submitIdentify, submitVerify } from "./controllers.js";
import { ConsoleSession } from "./session.js";
import { renderEnroll, renderHerd, renderIdentify,
         renderVerify } from "./views.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

let session = new ConsoleSession(
  new ServiceClient(el<HTMLInputElement>("base-url").value));

async function connect(): Promise<void> {
  session = new ConsoleSession(
    new ServiceClient(el<HTMLInputElement>("base-url").value));
  const health = el<HTMLSpanElement>("health");
  health.textContent = "connecting…";
  try {
    const status = await session.client.health();
    health.textContent = `${status.status}, ${status.gallery_size} enrolled, `
      + `dim ${status.dim}`;
    await session.refreshHerd();
    el<HTMLDivElement>("herd-list").innerHTML = renderHerd(session.herd);
  } catch (err) {
    console.error("health check failed:", err);
    health.textContent = "unreachable";
  }
}

function switchTab(name: string): void {
  for (const button of document.querySelectorAll<HTMLButtonElement>(
      "nav.tabs button")) {
    button.classList.toggle("active", button.dataset.tab === name);
  }
  for (const panel of document.querySelectorAll<HTMLElement>(
      "section.panel")) {
    panel.classList.toggle("active", panel.id === `panel-${name}`);
  }
}

interface PhotoPicker {
  blob(): Blob | null;
  objectUrl(): string | null;
}

/** File input plus webcam capture feeding one chosen-photo slot. */
function setupPicker(prefix: string): PhotoPicker {
  const file = el<HTMLInputElement>(`${prefix}-file`);
  const cameraButton = el<HTMLButtonElement>(`${prefix}-camera`);
  const captureButton = el<HTMLButtonElement>(`${prefix}-capture`);
  const video = el<HTMLVideoElement>(`${prefix}-video`);
  const chosen = el<HTMLImageElement>(`${prefix}-chosen`);
  let current: { blob: Blob; url: string } | null = null;

  function choose(blob: Blob): void {
    if (current !== null) {
      URL.revokeObjectURL(current.url);
    }
    current = { blob, url: URL.createObjectURL(blob) };
    chosen.src = current.url;
    chosen.hidden = false;
  }

  file.addEventListener("change", () => {
    const picked = file.files?.[0];
    if (picked !== undefined) {
      choose(picked);
    }
  });

  cameraButton.addEventListener("click", async () => {
    if (video.classList.contains("live")) {
      closeCamera(video);
      video.classList.remove("live");
      captureButton.hidden = true;
      cameraButton.textContent = "Open camera";
      return;
    }
    const stream = await openCamera(video);
    if (stream !== null) {
      video.classList.add("live");
      captureButton.hidden = false;
      cameraButton.textContent = "Close camera";
    }
  });

  captureButton.addEventListener("click", async () => {
    try {
      choose(await captureFrame(video));
    } catch (err) {
      console.error("capture failed:", err);
    }
  });

  return {
    blob: () => current?.blob ?? null,
    objectUrl: () => current?.url ?? null,
  };
}

/**
 * Wire one tab's form: disable the fieldset while a submission is in
 * flight, render the outcome, and let the retry button in a network
 * failure banner repeat the last attempt.
 */
function wireForm(formId: string, fieldsId: string, resultId: string,
                  run: () => Promise<string>): void {
  const form = el<HTMLFormElement>(formId);
  const fields = el<HTMLFieldSetElement>(fieldsId);
  const result = el<HTMLDivElement>(resultId);
  let lastAttempt: (() => void) | null = null;

  async function attempt(): Promise<void> {
    fields.disabled = true;
    try {
      result.innerHTML = await run();
    } finally {
      fields.disabled = false;
    }
  }

  form.addEventListener("submit", (event) => {
    event.preventDefault();
    lastAttempt = () => void attempt();
    void attempt();
  });
  result.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    if (target.dataset.action === "retry" && lastAttempt !== null) {
      lastAttempt();
    }
  });
}

function requirePhoto(picker: PhotoPicker): Blob {
  const blob = picker.blob();
  if (blob === null) {
    throw new Error("choose or capture a photo first");
  }
  return blob;
}

function bootstrap(): void {
  const enrollPicker = setupPicker("enroll");
  const verifyPicker = setupPicker("verify");
  const identifyPicker = setupPicker("identify");

  for (const button of document.querySelectorAll<HTMLButtonElement>(
      "nav.tabs button")) {
    button.addEventListener("click", () => {
      const tab = button.dataset.tab;
      if (tab !== undefined) {
        switchTab(tab);
      }
    });
  }

  el<HTMLButtonElement>("connect").addEventListener("click",
                                                    () => void connect());

  wireForm("enroll-form", "enroll-fields", "enroll-result", async () => {
    let blob: Blob;
    try {
      blob = requirePhoto(enrollPicker);
    } catch (err) {
      return `<p class="hint">${(err as Error).message}</p>`;
    }
    const extrasText = el<HTMLTextAreaElement>("enroll-extras").value.trim();
    let extras: Record<string, string> | undefined;
    if (extrasText !== "") {
      try {
        extras = JSON.parse(extrasText);
      } catch {
        return `<p class="hint">extra fields must be a JSON object</p>`;
      }
    }
    el<HTMLDivElement>("enroll-result").innerHTML =
      renderEnroll({ phase: "busy" });
    const state = await submitEnroll(
      session, blob, el<HTMLInputElement>("enroll-id").value,
      {
        breed: el<HTMLInputElement>("enroll-breed").value,
        gender: el<HTMLInputElement>("enroll-gender").value,
        date_of_birth: el<HTMLInputElement>("enroll-dob").value,
        disease_history: el<HTMLInputElement>("enroll-disease").value,
        vaccine_history: el<HTMLInputElement>("enroll-vaccine").value,
        extras,
      },
      enrollPicker.objectUrl());
    el<HTMLDivElement>("herd-list").innerHTML = renderHerd(session.herd);
    return renderEnroll(state);
  });

  wireForm("verify-form", "verify-fields", "verify-result", async () => {
    let blob: Blob;
    try {
      blob = requirePhoto(verifyPicker);
    } catch (err) {
      return `<p class="hint">${(err as Error).message}</p>`;
    }
    el<HTMLDivElement>("verify-result").innerHTML =
      renderVerify({ phase: "busy" });
    const state = await submitVerify(
      session, blob, el<HTMLInputElement>("verify-id").value);
    return renderVerify(state);
  });

  wireForm("identify-form", "identify-fields", "identify-result",
           async () => {
    let blob: Blob;
    try {
      blob = requirePhoto(identifyPicker);
    } catch (err) {
      return `<p class="hint">${(err as Error).message}</p>`;
    }
    const k = Number(el<HTMLInputElement>("identify-k").value);
    el<HTMLDivElement>("identify-result").innerHTML =
      renderIdentify({ phase: "busy" });
    const state = await submitIdentify(session, blob, k);
    return renderIdentify(state);
  });

  el<HTMLButtonElement>("herd-refresh").addEventListener("click",
                                                         async () => {
    try {
      await session.refreshHerd();
    } catch (err) {
      console.error("herd refresh failed:", err);
    }
    el<HTMLDivElement>("herd-list").innerHTML = renderHerd(session.herd);
  });

  void connect();
}

bootstrap();
