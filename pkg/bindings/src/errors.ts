/** Error types raised at the binding boundary, before any backend call. */

export class ShapeMismatchError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ShapeMismatchError";
  }
}

export class NonPositiveSizeError extends Error {
  /** Index of the first offending row. */
  readonly row: number;

  constructor(message: string, row: number) {
    super(message);
    this.name = "NonPositiveSizeError";
    this.row = row;
  }
}

/** The backend process failed; carries its stderr for diagnosis. */
export class BackendError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "BackendError";
  }
}
