class TrayPrompts:
    """Prompt text sent to the detector and verifier models"""

    # Grounding-style detectors expect lower-case phrases terminated by a period
    DETECTION_PROMPT = "a beetle."

    VERIFY_QUESTION = "Do you see beetles in this image?"

    VERIFY_SYSTEM = """You are checking photographs of entomology specimen trays.
                    Some beetles have already been covered with white rectangles.
                    Decide whether any uncovered beetle is still visible."""

    ANSWER_CONSTRAINT = 'End your answer with "YES" or "NO" as the final word.'

    @staticmethod
    def verify_user(question: str) -> str:
        return f"{question.strip()} {TrayPrompts.ANSWER_CONSTRAINT}"

    @staticmethod
    def normalize_detection_prompt(prompt: str) -> str:
        prompt = prompt.strip().lower()
        return prompt if prompt.endswith(".") else f"{prompt}."
