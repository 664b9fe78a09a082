/** Minimal deterministic SVG assembly: plain string building, no DOM. */

export type Attrs = Record<string, string | number>;

const ESCAPES: Record<string, string> = { "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" };

export function escapeText(s: string): string {
  return s.replace(/[&<>"]/g, (c) => ESCAPES[c]);
}

/** Fixed-precision coordinate formatting keeps output bytes reproducible. */
export function px(v: number): string {
  return v.toFixed(2);
}

export function el(tag: string, attrs: Attrs, children: string[] | string = []): string {
  const attrText = Object.entries(attrs)
    .map(([k, v]) => `${k}="${typeof v === "number" ? px(v) : escapeText(v)}"`)
    .join(" ");
  const body = Array.isArray(children) ? children.join("") : children;
  if (body === "") {
    return `<${tag} ${attrText}/>`;
  }
  return `<${tag} ${attrText}>${body}</${tag}>`;
}

export function svgDocument(width: number, height: number, children: string[]): string {
  return (
    `<svg xmlns="http://www.w3.org/2000/svg" width="${width}" height="${height}" ` +
    `viewBox="0 0 ${width} ${height}" font-family="Helvetica, Arial, sans-serif">` +
    children.join("") +
    `</svg>`
  );
}
