export class ExtractorError extends Error {}

/** A single image could not be decoded; callers skip and count it. */
export class DecodeError extends ExtractorError {}

/** The folder tree or the extraction options are unusable. */
export class UsageError extends ExtractorError {}
