/** Control panel: buttons for the request workflow, enabled strictly by the
 * shared transition table (an out-of-order press is impossible, not just
 * rejected). Server errors surface as toasts.
 */

import { ClientCommand } from "./protocol";
import { SessionClient } from "./session";

export const PANEL_COMMANDS: { command: ClientCommand; label: string }[] = [
  { command: "run_aps", label: "Run APS" },
  { command: "step_control", label: "Step x10" },
  { command: "mark_dissected", label: "Mark dissected" },
  { command: "reset", label: "Reset" },
];

export function buttonEnabled(client: SessionClient, command: ClientCommand): boolean {
  return client.canSend(command);
}

export function buildPanel(
  root: HTMLElement,
  client: SessionClient,
  stepCount = 10,
): Map<ClientCommand, HTMLButtonElement> {
  const buttons = new Map<ClientCommand, HTMLButtonElement>();
  for (const { command, label } of PANEL_COMMANDS) {
    const btn = document.createElement("button");
    btn.textContent = label;
    btn.dataset.command = command;
    btn.addEventListener("click", () => {
      if (!buttonEnabled(client, command)) return;
      if (command === "step_control") client.send(command, { n: stepCount });
      else client.send(command);
    });
    root.appendChild(btn);
    buttons.set(command, btn);
  }
  const refresh = () => {
    for (const [command, btn] of buttons) {
      btn.disabled = !buttonEnabled(client, command);
    }
  };
  client.onChange(refresh);
  refresh();
  return buttons;
}

export function showToast(root: HTMLElement, text: string): void {
  const div = document.createElement("div");
  div.className = "toast";
  div.textContent = text;
  root.appendChild(div);
  setTimeout(() => div.remove(), 6000);
}
