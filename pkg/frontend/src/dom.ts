/**
 * Browser glue: binds an AnnotationApp to the page, re-rendering after
 * every interaction. This is the only module that touches `document`.
 */

import { ApiClient } from "./api.js";
import { AnnotationApp } from "./app.js";
import type { TaskKind } from "./constants.js";
import { KINDS } from "./constants.js";
import { DraftStore } from "./drafts.js";

export function mount(root: HTMLElement): AnnotationApp {
  const params = new URLSearchParams(window.location.search);
  const worker = params.get("worker") ?? "anonymous";
  const kind = (params.get("kind") ?? "presence") as TaskKind;
  const token = window.sessionStorage.getItem("qapyramid-token") ?? undefined;
  const api = new ApiClient({ baseUrl: params.get("api") ?? "", token });
  const app = new AnnotationApp(api, new DraftStore(window.localStorage, worker), worker);

  const render = () => {
    root.innerHTML =
      app.renderHtml() +
      `<footer><button id="submit" ${app.canSubmit() ? "" : "disabled"}>Submit</button></footer>`;
  };

  root.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    if (target.id === "submit") {
      void app.submitCurrent().then(render);
    } else if (target.classList.contains("add-question")) {
      app.addQuestion();
      render();
    } else if (target.classList.contains("add-answer")) {
      app.addAnswer(Number(target.dataset.q));
      render();
    } else if (target.classList.contains("retry")) {
      void app.submitCurrent().then(render);
    }
  });

  root.addEventListener("input", (event) => {
    const target = event.target as HTMLInputElement;
    if (target.classList.contains("question")) {
      app.setQuestion(Number(target.dataset.q), target.value);
    } else if (target.classList.contains("answer")) {
      app.setAnswer(Number(target.dataset.q), Number(target.dataset.a), target.value);
    } else if (target.classList.contains("verify-answer")) {
      app.setVerifyAnswer(target.value);
    } else if (target.name === "verdict") {
      app.setVerdict(target.value === "valid");
    } else if (target.name?.startsWith("label-")) {
      const row = target.closest("li");
      if (row?.dataset.qa) {
        app.setLabel(row.dataset.qa, target.value as "present" | "not_present");
      }
    }
  });

  document.addEventListener("keydown", (event) => {
    if ((event.target as HTMLElement).tagName === "INPUT") return;
    if (app.handleKey(event.key)) {
      event.preventDefault();
      render();
    }
  });

  if (!KINDS.includes(kind)) {
    root.textContent = `unknown task kind: ${kind}`;
    return app;
  }
  void app.fetchNext(kind).then(render);
  return app;
}
