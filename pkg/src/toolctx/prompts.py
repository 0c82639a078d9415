"""Guided-instruction templates for the three editor levels.

Section headers, issue bullets and requirement bullets are fixed protocol
text; tests compare them byte for byte.
"""

SECTION_ORDER = (
    "task_description",
    "input_data",
    "analysis_task",
    "common_issues",
    "output_format",
    "requirements",
    "icl_examples",
)

TEMPLATES = {
    "retrieval": {
        "title": "Retrieval Optimization Editor",
        "task_description": (
            "You are an expert in optimizing knowledge base tool retrieval contents for "
            "retrieval-augmented language models. Your task is to analyze retrieval mismatches "
            "and improve KB retrieval contents to prevent retrieval errors."
        ),
        "contents_label": "Current KB Retrieval Contents",
        "mismatch_label": "Retrieval Mismatch Examples (query, expected_tools, retrieved_tools, retrieval_response)",
        "analysis_task": (
            "Analyze each retrieval mismatch example. Identify patterns in why the KB retrieves or "
            "selects incorrect tools. Determine which KB tool contents require refinement. Focus on "
            "clarity, specificity, and distinguishing information that improves retrieval recall rate."
        ),
        "issues_header": "Common Retrieval Issues:",
        "common_issues": (
            "Ambiguous or overlapping KB tool descriptions",
            "Missing concrete use cases or negative examples",
            "Unclear distinctions between similar tools",
            "Incomplete parameter or context details",
            "Insufficient guidance on when and why to use each tool",
        ),
        "output_format": (
            "ANALYSIS — Detailed analysis of retrieval issues and reasoning for improvements.",
            "IMPROVED KB TOOL DESCRIPTIONS — Updated KB retrieval contents in JSON format with "
            "headers: ‘name’, ‘retrieval content’.",
        ),
        "requirements": (
            "Only modify retrieval contents for tools in mismatch examples",
            "Keep all other retrieval contents unchanged",
            "Add examples and clarify distinctions",
            "Maintain retrieval consistency with prior optimizations",
        ),
        "improved_header": "IMPROVED KB TOOL DESCRIPTIONS",
    },
    "tool": {
        "title": "Tool Selection Optimization Editor",
        "task_description": (
            "You are an expert in optimizing tool descriptions for tool-use language models. Your "
            "task is to analyze tool mismatches and improve tool descriptions to prevent these errors."
        ),
        "contents_label": "Current Tool Descriptions",
        "mismatch_label": "Tool Mismatch Examples (query, expected_tools, actual_tools, model_response)",
        "analysis_task": (
            "Analyze each mismatch example. Identify why the model selects wrong tools and determine "
            "which descriptions require improvement."
        ),
        "issues_header": "Common Tool Selection Issues:",
        "common_issues": (
            "Ambiguous tool descriptions",
            "Missing key use cases or examples",
            "Overlapping functionality between tools",
            "Unclear parameter requirements",
            "Missing context about when to use each tool",
        ),
        "output_format": (
            "ANALYSIS — Detailed analysis of tool selection errors and rationale for each improvement.",
            "IMPROVED TOOL DESCRIPTIONS — Updated tool descriptions in JSON format with headers: "
            "‘name’, ‘description’.",
        ),
        "requirements": (
            "Modify only tools appearing in mismatch examples",
            "Maintain clarity, specificity, and distinguishing features",
            "Include examples for complex tools",
        ),
        "improved_header": "IMPROVED TOOL DESCRIPTIONS",
    },
    "parameter": {
        "title": "Parameter Filling Optimization Editor",
        "task_description": (
            "You are an expert in optimizing parameter descriptions to improve parameter filling "
            "accuracy in tool-use language models. Your task is to analyze parameter mismatches and "
            "enhance input schema clarity."
        ),
        "contents_label": "Current Tool Input Schemas",
        "mismatch_label": (
            "Parameter Mismatch Examples (query, param_coverage_ratio, param_all_match, "
            "tools_schema_expected, tools_schema_actual)"
        ),
        "analysis_task": (
            "Analyze each parameter mismatch, identify the cause, and refine schema descriptions and examples."
        ),
        "issues_header": "Common Parameter Issues:",
        "common_issues": (
            "Incorrect parameter types or formats",
            "Missing required parameters",
            "Misunderstood parameter meanings",
            "Confusion between similar parameters",
        ),
        "output_format": (
            "ANALYSIS — Explanation of parameter filling errors and reasoning for schema changes.",
            "IMPROVED TOOL DESCRIPTIONS — Updated tool schemas in JSON format with headers: ‘name’, ‘tools’.",
        ),
        "requirements": (
            "Modify only mismatched parameter schemas",
            "Clarify parameter purpose, type, and required status",
            "Add usage examples and specify expected formats",
        ),
        "improved_header": "IMPROVED TOOL DESCRIPTIONS",
    },
}

HEADERS = {
    "task_description": "Task Description:",
    "input_data": "Input Data:",
    "analysis_task": "Analysis Task:",
    "output_format": "Output Format:",
    "requirements": "Requirements:",
    "icl_examples": "In-Context Learning Examples:",
}

HISTORY_LABEL = "Prior Edits At This Level (most recent last, with outcomes)"

SUMMARY_PROMPT = (
    "Write a retrieval summary of the tool documented below. Cover what the tool does, its input "
    "schema (every parameter with its type and whether it is required), its output, and any system "
    "information such as constraints or typical use cases. Respond with the summary text only.\n\n"
    "{document}\n"
)

RETRY_SUFFIX = (
    "\n\nYour previous answer could not be used: {error}\n"
    "Answer again with an ANALYSIS section followed by the IMPROVED section containing valid JSON."
)
